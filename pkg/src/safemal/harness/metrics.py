"""Episode metrics and CSV persistence.

Episode CSVs hold only deterministic columns; solve wall times go to a
separate timing CSV so repeated runs are byte-identical.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from ..acquisition import compute_reward
from .episodes import EpisodeRecord, StepRow

SCHEMA_VERSION = 1
EPISODE_COLUMNS = ("step", "action", "reward", "e_prev", "e_t", "post_return", "in_sphere",
                   "side_effect", "nodes", "status")
TIMING_COLUMNS = ("step", "wall_ms")


class SchemaError(ValueError):
    pass


def _f(v: float) -> str:
    return repr(float(v))


def _b(v: bool) -> str:
    return "1" if v else "0"


def _parse_bool(s: str) -> bool:
    if s not in ("0", "1"):
        raise SchemaError(f"bad boolean {s!r}")
    return s == "1"


def episode_csv(rec: EpisodeRecord) -> str:
    buf = io.StringIO()
    buf.write(f"# safemal-episode v{SCHEMA_VERSION} domain={rec.domain} policy={rec.policy} "
              f"seed={rec.seed} e0={_f(rec.e0)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EPISODE_COLUMNS)
    for r in rec.rows:
        w.writerow([r.step, " ".join(_f(a) for a in r.action), _f(r.reward), _f(r.e_prev),
                    _f(r.e_t), _b(r.post_return), _b(r.in_sphere), _b(r.side_effect), r.nodes,
                    r.status])
    return buf.getvalue()


def timing_csv(rec: EpisodeRecord) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TIMING_COLUMNS)
    for r in rec.rows:
        w.writerow([r.step, _f(r.wall_ms)])
    return buf.getvalue()


def parse_episode_csv(text: str, timing: str | None = None) -> EpisodeRecord:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# safemal-episode v"):
        raise SchemaError("missing episode header")
    meta = dict(kv.split("=", 1) for kv in lines[0].split()[3:])
    version = lines[0].split()[2]
    if version != f"v{SCHEMA_VERSION}":
        raise SchemaError(f"episode schema {version} is not supported")
    try:
        rec = EpisodeRecord(meta["domain"], meta["policy"], int(meta["seed"]), float(meta["e0"]))
    except (KeyError, ValueError) as exc:
        raise SchemaError("malformed episode header") from exc
    reader = csv.reader(lines[1:])
    header = next(reader, None)
    if tuple(header or ()) != EPISODE_COLUMNS:
        raise SchemaError(f"unexpected columns {header}")
    for row in reader:
        if len(row) != len(EPISODE_COLUMNS):
            raise SchemaError(f"row has {len(row)} fields")
        try:
            step = StepRow(
                step=int(row[0]), action=tuple(float(v) for v in row[1].split()),
                reward=float(row[2]), e_prev=float(row[3]), e_t=float(row[4]),
                post_return=_parse_bool(row[5]), in_sphere=_parse_bool(row[6]),
                side_effect=_parse_bool(row[7]), nodes=int(row[8]), status=row[9],
            )
        except ValueError as exc:
            raise SchemaError(f"bad value in row {row}: {exc}") from exc
        if step.e_t < 0 or step.e_prev < 0:
            raise SchemaError("model error must be nonnegative")
        rec.rows.append(step)
    if timing is not None:
        trows = list(csv.reader(timing.splitlines()))
        if not trows or tuple(trows[0]) != TIMING_COLUMNS or len(trows) - 1 != len(rec.rows):
            raise SchemaError("timing file does not match the episode")
        for r, t in zip(rec.rows, trows[1:]):
            if int(t[0]) != r.step:
                raise SchemaError("timing steps do not match")
            r.wall_ms = float(t[1])
    return rec


def write_episode(rec: EpisodeRecord, path, timing_path=None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(episode_csv(rec))
    if timing_path is not None:
        Path(timing_path).parent.mkdir(parents=True, exist_ok=True)
        Path(timing_path).write_text(timing_csv(rec))


def read_episode(path, timing_path=None) -> EpisodeRecord:
    timing = Path(timing_path).read_text() if timing_path is not None else None
    return parse_episode_csv(Path(path).read_text(), timing)


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class EpisodeMetrics:
    auc: float  # trapezoid integral of the gain curve 1 - e_t / e_0 over t = 0..M
    cumulative_gain: float  # 1 - e_M / e_0
    final_error: float
    mean_step_gain: float
    safety_rate: float  # post-return rows inside the sphere
    side_effect_rate: float
    mean_nodes: float
    mean_solve_ms: float


def gain_curve(errors) -> np.ndarray:
    e = np.asarray(errors, dtype=float)
    if e[0] <= 0:
        return np.zeros_like(e)
    return 1.0 - e / e[0]


def episode_metrics(rec: EpisodeRecord) -> EpisodeMetrics:
    if not rec.rows:
        raise ValueError("episode has no steps")
    e = rec.errors
    g = gain_curve(e)
    steps = [compute_reward(a, b) for a, b in zip(e[:-1], e[1:])]
    post = [r for r in rec.rows if r.post_return]
    return EpisodeMetrics(
        auc=float(np.sum(0.5 * (g[1:] + g[:-1]))),
        cumulative_gain=float(g[-1]),
        final_error=float(e[-1]),
        mean_step_gain=float(np.mean(steps)),
        safety_rate=float(np.mean([r.in_sphere for r in post])) if post else float("nan"),
        side_effect_rate=float(np.mean([r.side_effect for r in rec.rows])),
        mean_nodes=float(np.mean([r.nodes for r in rec.rows])),
        mean_solve_ms=float(np.mean([r.wall_ms for r in rec.rows])),
    )


METRIC_NAMES = tuple(f.name for f in fields(EpisodeMetrics))
TIMING_METRICS = ("mean_solve_ms",)


def compute_metrics(records: Sequence[EpisodeRecord]) -> dict:
    """Per-policy aggregate: mean, std and median of every episode metric."""
    if not records:
        raise ValueError("no records to summarize")
    by_policy: dict = {}
    for rec in records:
        by_policy.setdefault(rec.policy, []).append(episode_metrics(rec))
    out = {}
    for policy, ms in by_policy.items():
        agg = {"episodes": len(ms)}
        for name in METRIC_NAMES:
            v = np.array([getattr(m, name) for m in ms])
            agg[name] = {"mean": float(np.mean(v)), "std": float(np.std(v)),
                         "median": float(np.median(v))}
        out[policy] = agg
    return out


def summary_csv(summary: dict, timing: bool = False) -> str:
    """Deterministic metrics, or only the timing metrics when ``timing``."""
    names = TIMING_METRICS if timing else tuple(n for n in METRIC_NAMES
                                                if n not in TIMING_METRICS)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["policy", "episodes"] + [f"{n}_{s}" for n in names
                                         for s in ("mean", "std", "median")])
    for policy in sorted(summary):
        agg = summary[policy]
        w.writerow([policy, agg["episodes"]] + [_f(agg[n][s]) for n in names
                                                for s in ("mean", "std", "median")])
    return buf.getvalue()
