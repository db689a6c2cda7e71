"""Experiment configuration: an INI file with fixed sections and keys.

Every key has a type and a default; unknown sections or keys, bad values and
an empty seed list are rejected before anything runs.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, fields, replace
from pathlib import Path

from ..baselines import POLICIES
from ..dynamics import EnsembleConfig

DOMAINS = ("aircraft", "admets")
MIN_INITIAL_SAMPLES = EnsembleConfig().min_samples


class ConfigError(ValueError):
    pass


def _ints(text: str) -> tuple:
    text = text.strip()
    if not text:
        return ()
    out = []
    for part in text.replace(",", " ").split():
        if ".." in part:
            a, b = part.split("..")
            out.extend(range(int(a), int(b) + 1))
        else:
            out.append(int(part))
    return tuple(out)


def _floats(text: str) -> tuple:
    return tuple(float(p) for p in text.replace(",", " ").split())


def _words(text: str) -> tuple:
    return tuple(p for p in text.replace(",", " ").split())


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# section -> key -> parser; field names equal the keys
SCHEMA = {
    "experiment": {"domain": str, "policies": _words, "seeds": _ints, "steps": int,
                   "output": str, "checkpoint": str, "workers": int},
    "meta": {"episodes": int, "meta_steps": int, "gamma": float, "tau": float,
             "buffer_capacity": int, "batch_size": int, "lr": float, "noise_start": float,
             "noise_end": float, "target_candidates": int, "hidden": int, "z_dim": int,
             "q_hidden": _ints, "meta_seed": int},
    "policy": {"lambda1": float, "slack_penalty": float, "margin_weight": float,
               "epsilon": float, "horizon": int, "radius": float, "node_limit": int,
               "baseline_samples": int, "candidates": int, "tighten_bounds": _bool,
               "baseline_filter": _bool, "commit_horizon": int},
    "ensemble": {"members": int, "ensemble_hidden": _ints, "ensemble_epochs": int,
                 "ensemble_lr": float, "eval_fraction": float},
    "domain": {"state_dim": int, "action_dim": int, "noise_std": float,
               "damage_scale": float, "init_blocks": int, "init_scale": float,
               "probe_points": int, "grid_points": int, "admets_noise": float},
    "sweep": {"sweep_lambda1": _floats, "sweep_epsilon": _floats},
}


@dataclass(frozen=True)
class ExperimentConfig:
    domain: str = "aircraft"
    policies: tuple = ("ours",)
    seeds: tuple = (0,)
    steps: int = 20  # M
    output: str = "results"
    checkpoint: str = ""
    workers: int = 1
    # meta-training
    episodes: int = 500  # N
    meta_steps: int = 5
    gamma: float = 0.9
    tau: float = 0.05
    buffer_capacity: int = 5000
    batch_size: int = 16
    lr: float = 1e-3
    noise_start: float = 0.3
    noise_end: float = 0.05
    target_candidates: int = 64
    hidden: int = 16
    z_dim: int = 8
    q_hidden: tuple = (8, 8)
    meta_seed: int = 0
    # policy
    lambda1: float = 1.0
    slack_penalty: float = 100.0
    margin_weight: float = 1e-4
    epsilon: float = 0.05
    horizon: int = 2
    radius: float = 1.0
    node_limit: int = 1000
    baseline_samples: int = 64
    candidates: int = 128
    tighten_bounds: bool = True
    commit_horizon: int = 0  # actions executed per solve; 0 commits the whole block
    baseline_filter: bool = False  # restrict baseline candidates to the chance-constrained set
    # ensemble
    members: int = 5
    ensemble_hidden: tuple = (16,)
    ensemble_epochs: int = 150
    ensemble_lr: float = 1e-2
    eval_fraction: float = 0.2
    # domain
    state_dim: int = 6
    action_dim: int = 4
    noise_std: float = 0.02
    damage_scale: float = 1.0
    init_blocks: int = 3
    init_scale: float = 0.2
    probe_points: int = 200
    grid_points: int = 101
    admets_noise: float = 0.05
    # sweep grids
    sweep_lambda1: tuple = (0.0, 1.0)
    sweep_epsilon: tuple = (0.05,)

    def __post_init__(self):
        validate(self)

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)


def validate(cfg: ExperimentConfig) -> None:
    if cfg.domain not in DOMAINS:
        raise ConfigError(f"domain must be one of {DOMAINS}, got {cfg.domain!r}")
    if not cfg.policies:
        raise ConfigError("policies must not be empty")
    for p in cfg.policies:
        if p not in POLICIES:
            raise ConfigError(f"unknown policy {p!r}; choose from {POLICIES}")
        if p == "bo" and cfg.domain != "admets":
            raise ConfigError("the bo baseline is defined for the admets domain only")
    if not cfg.seeds:
        raise ConfigError("seeds must not be empty")
    if len(set(cfg.seeds)) != len(cfg.seeds):
        raise ConfigError("seeds must be distinct")
    positive = ("steps", "workers", "episodes", "meta_steps", "buffer_capacity", "batch_size",
                "target_candidates", "hidden", "z_dim", "node_limit", "baseline_samples",
                "candidates", "members", "ensemble_epochs", "state_dim", "action_dim",
                "probe_points", "grid_points")
    for k in positive:
        if getattr(cfg, k) < 1:
            raise ConfigError(f"{k} must be positive")
    if cfg.members < 2:
        raise ConfigError("members must be at least 2")
    for k in ("gamma", "tau"):
        if not 0.0 <= getattr(cfg, k) <= 1.0:
            raise ConfigError(f"{k} must lie in [0, 1]")
    if not 0.0 < cfg.epsilon <= 0.5:
        raise ConfigError("epsilon must lie in (0, 0.5]")
    if cfg.horizon < 1:
        raise ConfigError("horizon must be at least 1")
    if not 0 <= cfg.commit_horizon <= cfg.horizon:
        raise ConfigError("commit_horizon must lie in [0, horizon]")
    if cfg.radius <= 0:
        raise ConfigError("radius must be positive")
    for k in ("lambda1", "slack_penalty", "margin_weight", "noise_std", "damage_scale",
              "init_blocks", "init_scale", "admets_noise", "lr", "ensemble_lr"):
        if not getattr(cfg, k) >= 0:
            raise ConfigError(f"{k} must be nonnegative")
    if not 0.0 <= cfg.eval_fraction < 1.0:
        raise ConfigError("eval_fraction must lie in [0, 1)")
    if any(h < 1 for h in cfg.q_hidden) or any(h < 1 for h in cfg.ensemble_hidden):
        raise ConfigError("layer widths must be positive")
    if cfg.domain == "aircraft" and not (cfg.state_dim <= 12 and cfg.action_dim <= 12):
        raise ConfigError("aircraft dimensions are limited to 12")
    if cfg.domain == "aircraft" and cfg.init_blocks * cfg.horizon < MIN_INITIAL_SAMPLES:
        raise ConfigError(f"init_blocks * horizon must give at least {MIN_INITIAL_SAMPLES} "
                          "initial samples for the dynamics ensemble")
    if any(not 0.0 < e <= 0.5 for e in cfg.sweep_epsilon):
        raise ConfigError("sweep_epsilon values must lie in (0, 0.5]")
    if any(v < 0 for v in cfg.sweep_lambda1):
        raise ConfigError("sweep_lambda1 values must be nonnegative")


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    values: dict = {}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        keys = SCHEMA[section]
        for key, raw in cp.items(section):
            if key not in keys:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            try:
                values[key] = keys[key](raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from exc
    try:
        return ExperimentConfig(**values)
    except TypeError as exc:  # pragma: no cover - schema and dataclass agree
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    return parse_config(p.read_text())


def dump_config(cfg: ExperimentConfig) -> str:
    """INI text that parses back to ``cfg``."""
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, tuple):
            return " ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
        if isinstance(v, float):
            return repr(v)
        return str(v)

    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for k in keys:
            lines.append(f"{k} = {fmt(getattr(cfg, k))}")
        lines.append("")
    return "\n".join(lines)


def _check_schema() -> None:
    names = {f.name for f in fields(ExperimentConfig)}
    keys = [k for s in SCHEMA.values() for k in s]
    assert len(keys) == len(set(keys)) and set(keys) == names


_check_schema()
