"""Comparison acquisition strategies.

Aircraft selectors score candidate action blocks (``steps * J`` flattened)
drawn by Latin hypercube inside the actuator box; ADMETS selectors work on the
amplitude grid.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy.stats import norm, qmc

from .dynamics import DynamicsEnsemble, member_predictions
from .envs import GpHyper, fit_gp, gp_posterior
from .policy import gaussian_quantile

POLICIES = ("ours", "epistemic", "diversity", "bo", "random")


def _as_candidates(candidates) -> np.ndarray:
    c = np.asarray(candidates, dtype=float)
    if c.ndim == 1:
        c = c[:, None]
    if c.shape[0] == 0:
        raise ValueError("candidate set is empty")
    return c


def lhs_candidates(lo, hi, n: int = 128, seed=0) -> np.ndarray:
    """``n`` Latin-hypercube points in the box ``[lo, hi]``."""
    lo = np.asarray(lo, dtype=float).reshape(-1)
    hi = np.asarray(hi, dtype=float).reshape(-1)
    if n < 1:
        raise ValueError("need at least one candidate")
    pts = qmc.LatinHypercube(d=lo.size, seed=np.random.default_rng(seed)).random(n)
    return lo + pts * (hi - lo)


def epistemic_scores(ens: DynamicsEnsemble, x_t, candidates) -> np.ndarray:
    """Summed trace of member-prediction covariance along the mean rollout of each block."""
    c = _as_candidates(candidates)
    J = ens.action_dim
    if c.shape[1] % J:
        raise ValueError("candidate width must be a multiple of the action dimension")
    steps = c.shape[1] // J
    x = np.tile(np.asarray(x_t, dtype=float), (c.shape[0], 1))
    score = np.zeros(c.shape[0])
    for k in range(steps):
        preds = member_predictions(ens, x, c[:, k * J:(k + 1) * J])  # (K, n, D)
        score += preds.var(axis=0, ddof=1 if preds.shape[0] > 1 else 0).sum(axis=-1)
        x = preds.mean(axis=0)
    return score


def _first_max(score, rtol: float = 1e-12) -> int:
    """Argmax with roundoff-level ties resolved to the lowest index."""
    best = float(np.max(score))
    return int(np.flatnonzero(score >= best - rtol * (1.0 + abs(best)))[0])


def epistemic_select(ens: DynamicsEnsemble, x_t, candidates) -> np.ndarray:
    c = _as_candidates(candidates)
    return c[_first_max(epistemic_scores(ens, x_t, c))].copy()


def diversity_select(history: Sequence, candidates, action_dim: int | None = None) -> np.ndarray:
    """Candidate whose actions are farthest (min distance) from every past action.

    ``history`` is a sequence of past actions. A block candidate counts as the
    set of its per-step actions; base case: no history gives the first candidate.
    """
    c = _as_candidates(candidates)
    past = [np.asarray(a, dtype=float).reshape(-1) for a in history]
    if not past:
        return c[0].copy()
    P = np.stack(past)
    J = action_dim or P.shape[1]
    if c.shape[1] % J or P.shape[1] != J:
        raise ValueError("candidate and history action widths disagree")
    steps = c.shape[1] // J
    blocks = c.reshape(c.shape[0], steps, J)
    d = np.linalg.norm(blocks[:, :, None, :] - P[None, None], axis=-1)  # (n, steps, m)
    score = d.min(axis=(1, 2))
    return c[int(np.argmax(score))].copy()


def expected_improvement(mean, std, best: float, xi: float = 0.01) -> np.ndarray:
    mean = np.asarray(mean, dtype=float)
    std = np.asarray(std, dtype=float)
    imp = mean - best - xi
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(std > 0, imp / std, 0.0)
        ei = np.where(std > 0, imp * norm.cdf(z) + std * norm.pdf(z), np.maximum(imp, 0.0))
    return np.maximum(ei, 0.0)


def bo_select(observations: Sequence, grid, epsilon: float, hyper: GpHyper = GpHyper(),
              xi: float = 0.01) -> tuple[float, dict]:
    """Safe expected-improvement choice on ``grid`` from ``(amplitude, score)`` pairs."""
    g = np.asarray(grid, dtype=float).reshape(-1)
    if g.size == 0:
        raise ValueError("grid is empty")
    if len(observations) < 1:
        raise ValueError("need at least one observation")
    a, y = (np.array(v, dtype=float) for v in zip(*observations))
    gp = fit_gp(a, y, hyper)
    mean, std = gp_posterior(gp, g)
    margin = mean - gaussian_quantile(1.0 - epsilon) * std
    safe = margin >= 0.0
    if not np.any(safe):
        i = int(np.argmax(margin))
        return float(g[i]), {"index": i, "fallback": True, "ei": 0.0}
    ei = expected_improvement(mean, std, float(np.max(y)), xi)
    i = int(np.argmax(np.where(safe, ei, -np.inf)))
    return float(g[i]), {"index": i, "fallback": False, "ei": float(ei[i])}


def random_select(candidates, seed) -> np.ndarray:
    c = _as_candidates(candidates)
    i = int(np.random.default_rng(seed).integers(c.shape[0]))
    return c[i].copy()
