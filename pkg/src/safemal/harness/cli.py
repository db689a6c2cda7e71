"""Command line entry point: ``safemal {meta-train,eval,sweep,inspect} --config PATH``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

from ..acquisition import MetaTrainLog
from ..baselines import POLICIES
from .checkpoint import describe_checkpoint, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .runner import format_summary, run_experiment, run_meta_training, untrained_acquisition

log = logging.getLogger("safemal")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="safemal", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    helps = {
        "meta-train": "train the acquisition function and save a checkpoint",
        "eval": "run test episodes for the configured policies",
        "sweep": "evaluate over the lambda1 x epsilon grid",
        "inspect": "print config and checkpoint summaries",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", required=True, metavar="PATH", help="experiment INI file")
        p.add_argument("--seed", type=int, help="override the seed list (eval/sweep) or the "
                       "meta-training seed")
        p.add_argument("--out", metavar="DIR", help="output directory (default: config output)")
        p.add_argument("--policy", choices=POLICIES, help="evaluate this policy only")
        p.add_argument("--checkpoint", metavar="PATH", help="checkpoint to read or write")
    return parser


def _checkpoint_path(args, cfg: ExperimentConfig, out: Path) -> Path:
    if args.checkpoint:
        return Path(args.checkpoint)
    if cfg.checkpoint:
        return Path(cfg.checkpoint)
    return out / "checkpoint.ckpt"


def _apply_overrides(args, cfg: ExperimentConfig) -> ExperimentConfig:
    kw = {}
    if args.policy:
        kw["policies"] = (args.policy,)
    if args.seed is not None:
        kw["meta_seed" if args.command == "meta-train" else "seeds"] = (
            args.seed if args.command == "meta-train" else (args.seed,))
    return replace(cfg, **kw) if kw else cfg


def _acquisition_for(args, cfg: ExperimentConfig):
    if "ours" not in cfg.policies:
        return None
    path = args.checkpoint or cfg.checkpoint
    if path:
        return load_checkpoint(path)
    log.warning("no checkpoint given; the learned policy uses an untrained network")
    return untrained_acquisition(cfg)


def cmd_meta_train(args, cfg, out: Path) -> int:
    record = MetaTrainLog()
    acq = run_meta_training(cfg, record=record)
    path = save_checkpoint(acq, _checkpoint_path(args, cfg, out))
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "meta_log.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["update", "loss", "reward"])
        for i, (loss, r) in enumerate(zip(record.losses, record.rewards)):
            w.writerow([i, repr(float(loss)), repr(float(r))])
    print(f"checkpoint written to {path} ({len(record.losses)} updates, "
          f"{record.skipped} skipped episodes)")
    return 0


def cmd_eval(args, cfg, out: Path) -> int:
    acq = _acquisition_for(args, cfg)
    res = run_experiment(cfg, acq, out)
    if res.summary:
        print(format_summary(res.summary))
    for policy, seed, err in res.failures:
        print(f"cell {policy} seed {seed} failed: {err}", file=sys.stderr)
    print(f"results written to {out}")
    return res.exit_code


def cmd_sweep(args, cfg, out: Path) -> int:
    acq = _acquisition_for(args, cfg)
    code = 0
    for lam in cfg.sweep_lambda1:
        for eps in cfg.sweep_epsilon:
            sub = replace(cfg, lambda1=lam, epsilon=eps)
            cell_out = out / f"lambda1={lam:g}_epsilon={eps:g}"
            res = run_experiment(sub, acq, cell_out)
            print(f"lambda1={lam:g} epsilon={eps:g}")
            if res.summary:
                print(format_summary(res.summary))
            code = max(code, res.exit_code)
    return code


def cmd_inspect(args, cfg, out: Path) -> int:
    print(dump_config(cfg))
    path = _checkpoint_path(args, cfg, out)
    if path.is_file():
        print(f"checkpoint {path}")
        print(describe_checkpoint(path))
    else:
        print(f"no checkpoint at {path}")
    return 0


COMMANDS = {"meta-train": cmd_meta_train, "eval": cmd_eval, "sweep": cmd_sweep,
            "inspect": cmd_inspect}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _apply_overrides(args, load_config(args.config))
    except ConfigError as exc:
        print(f"safemal: config error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"safemal: {exc}", file=sys.stderr)
        return 1
    out = Path(args.out or cfg.output)
    try:
        return COMMANDS[args.command](args, cfg, out)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"safemal: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
