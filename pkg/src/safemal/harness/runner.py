"""Experiment cells (policy x seed), per-cell CSVs and the summary table."""
from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..acquisition import AcquisitionParams, MetaConfig, MetaTrainLog, init_acquisition, meta_train
from .config import ExperimentConfig, dump_config
from .episodes import EpisodeRecord, make_task, meta_distribution, run_episode
from .metrics import compute_metrics, summary_csv, write_episode

log = logging.getLogger(__name__)

FAILURE_THRESHOLD = 0.10


@dataclass
class ExperimentResult:
    records: list = field(default_factory=list)
    failures: list = field(default_factory=list)  # (policy, seed, message)
    summary: dict = field(default_factory=dict)
    exit_code: int = 0


def meta_config(cfg: ExperimentConfig) -> MetaConfig:
    return MetaConfig(episodes=cfg.episodes, steps=cfg.meta_steps, gamma=cfg.gamma, tau=cfg.tau,
                      buffer_capacity=cfg.buffer_capacity, batch_size=cfg.batch_size, lr=cfg.lr,
                      noise_start=cfg.noise_start, noise_end=cfg.noise_end,
                      target_candidates=cfg.target_candidates, hidden=cfg.hidden,
                      z_dim=cfg.z_dim, q_hidden=tuple(cfg.q_hidden))


def run_meta_training(cfg: ExperimentConfig, seed: int | None = None,
                      record: MetaTrainLog | None = None) -> AcquisitionParams:
    return meta_train(meta_distribution(cfg), meta_config(cfg),
                      seed=cfg.meta_seed if seed is None else seed, record=record)


def untrained_acquisition(cfg: ExperimentConfig, seed: int | None = None) -> AcquisitionParams:
    task = make_task(cfg, 0)
    return init_acquisition(task.state_dim, task.action_dim, task.horizon,
                            np.random.default_rng(cfg.meta_seed if seed is None else seed),
                            cfg.hidden, cfg.z_dim, cfg.q_hidden)


def _cell(args):
    acq, cfg, policy, seed = args
    try:
        return run_episode(acq, cfg, seed, policy), None
    except Exception as exc:  # recorded, the run continues
        return None, f"{type(exc).__name__}: {exc}"


def _cell_name(policy: str, seed: int) -> str:
    return f"{policy}_seed{seed}.csv"


def run_experiment(cfg: ExperimentConfig, acq: AcquisitionParams | None = None,
                   out_dir=None) -> ExperimentResult:
    """Run every (policy, seed) cell; writes CSVs when ``out_dir`` is given."""
    if "ours" in cfg.policies and acq is None:
        raise ValueError("policy 'ours' needs acquisition parameters")
    cells = [(acq if p == "ours" else None, cfg, p, s) for p in cfg.policies for s in cfg.seeds]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            outcomes = list(pool.map(_cell, cells))
    else:
        outcomes = [_cell(c) for c in cells]
    res = ExperimentResult()
    for (_, _, policy, seed), (rec, err) in zip(cells, outcomes):
        if rec is None:
            log.error("cell %s seed %d failed: %s", policy, seed, err)
            res.failures.append((policy, seed, err))
        else:
            res.records.append(rec)
    if res.records:
        res.summary = compute_metrics(res.records)
    if len(res.failures) > FAILURE_THRESHOLD * len(cells):
        res.exit_code = 1
    if out_dir is not None:
        write_results(res, cfg, out_dir)
    return res


def write_results(res: ExperimentResult, cfg: ExperimentConfig, out_dir) -> Path:
    out = Path(out_dir)
    for rec in res.records:
        name = _cell_name(rec.policy, rec.seed)
        write_episode(rec, out / "episodes" / name, out / "timing" / name)
    (out / "config.ini").write_text(dump_config(cfg))
    if res.summary:
        (out / "summary.csv").write_text(summary_csv(res.summary))
        (out / "timing_summary.csv").write_text(summary_csv(res.summary, timing=True))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["policy", "seed", "error"])
    w.writerows(res.failures)
    (out / "failures.csv").write_text(buf.getvalue())
    return out


def format_summary(summary: dict) -> str:
    cols = ("auc", "cumulative_gain", "final_error", "safety_rate", "side_effect_rate",
            "mean_solve_ms")
    lines = ["policy      " + "  ".join(f"{c:>22}" for c in cols)]
    for policy in sorted(summary):
        agg = summary[policy]
        cells = [f"{agg[c]['mean']:10.4f} +- {agg[c]['std']:8.4f}" for c in cols]
        lines.append(f"{policy:<12}" + "  ".join(cells))
    return "\n".join(lines)


def records_by_policy(records: list[EpisodeRecord]) -> dict:
    out: dict = {}
    for rec in records:
        out.setdefault(rec.policy, []).append(rec)
    return out
