"""Bootstrap ensemble of MLP dynamics models.

Each member maps ``concat(x, u)`` to ``x'`` and is trained on its own
bootstrap resample. The ensemble provides a point prediction, a local affine
linearization and the spread of member Jacobians, which the safety
constraints use as parameter uncertainty.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import kernels
from .nn import DivergenceError, MlpParams, ShapeError, init_mlp, mlp_forward


@dataclass(frozen=True)
class TransitionSample:
    x: np.ndarray
    u: np.ndarray
    x_next: np.ndarray

    @classmethod
    def make(cls, x, u, x_next) -> "TransitionSample":
        x, u, xn = (np.array(a, dtype=float).reshape(-1) for a in (x, u, x_next))
        if x.shape != xn.shape:
            raise ShapeError(f"state {x.shape} and next state {xn.shape} differ")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u)) and np.all(np.isfinite(xn))):
            raise ValueError("transition contains non-finite values")
        return cls(x, u, xn)


@dataclass(frozen=True)
class EnsembleConfig:
    n_members: int = 5
    hidden: tuple = (16,)
    epochs: int = 150
    lr: float = 1e-2
    eval_fraction: float = 0.2
    min_samples: int = 5
    warm_start: bool = True

    def __post_init__(self):
        if self.n_members < 2:
            raise ValueError("an ensemble needs at least two members")
        if not 0.0 <= self.eval_fraction < 1.0:
            raise ValueError("eval_fraction must be in [0, 1)")


@dataclass
class DynamicsEnsemble:
    members: list
    config: EnsembleConfig
    eval_set: list
    train_set: list
    state_dim: int
    action_dim: int
    train_loss: list = field(default_factory=list)


@dataclass
class Linearization:
    A_bar: np.ndarray
    B_bar: np.ndarray
    c_bar: np.ndarray
    sigma_state: np.ndarray
    sigma_action: np.ndarray
    noise_std: np.ndarray | None = None

    def __post_init__(self):
        D = self.A_bar.shape[0]
        if self.noise_std is None:
            self.noise_std = np.zeros(D)
        if np.any(self.sigma_state < 0) or np.any(self.sigma_action < 0):
            raise ValueError("uncertainty entries must be nonnegative")

    @property
    def state_dim(self) -> int:
        return self.A_bar.shape[0]

    @property
    def action_dim(self) -> int:
        return self.B_bar.shape[1]


def bootstrap_resample(data: Sequence, seed) -> list:
    """Resample with replacement, same size, deterministic per ``seed``."""
    if len(data) == 0:
        raise ValueError("cannot resample an empty dataset")
    idx = np.random.default_rng(seed).integers(0, len(data), size=len(data))
    return [data[i] for i in idx]


def split_eval(data: Sequence, fraction: float) -> tuple[list, list]:
    """Deterministic, append-stable split: every ``round(1/fraction)``-th sample is held out.

    Samples keep their role as the dataset grows, so warm-started members never
    see an evaluation sample.
    """
    if fraction <= 0.0:
        return list(data), []
    period = max(2, int(round(1.0 / fraction)))
    train = [s for i, s in enumerate(data) if i % period != period - 1]
    held = [s for i, s in enumerate(data) if i % period == period - 1]
    return train, held


def _arrays(data):
    X = np.array([np.concatenate([s.x, s.u]) for s in data])
    Y = np.array([s.x_next for s in data])
    return X, Y


def train_ensemble(data: Sequence[TransitionSample], config: EnsembleConfig = EnsembleConfig(),
                   seed: int = 0, previous: DynamicsEnsemble | None = None) -> DynamicsEnsemble:
    """Fit ``config.n_members`` members on bootstrap resamples of the training split."""
    if len(data) < config.min_samples:
        raise ValueError(f"need at least {config.min_samples} samples, got {len(data)}")
    D, J = data[0].x.size, data[0].u.size
    train, held = split_eval(data, config.eval_fraction)
    seeds = np.random.SeedSequence(seed).spawn(config.n_members)
    members, losses = [], []
    for b, ss in enumerate(seeds):
        rng = np.random.default_rng(ss)
        sample = bootstrap_resample(train, rng.integers(2**63))
        X, Y = _arrays(sample)
        if previous is not None and config.warm_start:
            start = previous.members[b]
        else:
            start = init_mlp([D + J, *config.hidden, D], rng)
        W = [np.ascontiguousarray(l.weight, dtype=float).copy() for l in start.layers]
        bias = [l.bias.copy() for l in start.layers]
        relu = [l.activation == "relu" for l in start.layers]
        zeros = lambda arrs: [np.zeros_like(a) for a in arrs]
        loss, _ = kernels.mlp_fit_adam(
            W, bias, relu, np.ascontiguousarray(X), np.ascontiguousarray(Y),
            zeros(W), zeros(W), zeros(bias), zeros(bias), 0,
            config.epochs, config.lr, 0.9, 0.999, 1e-8,
        )
        if not np.isfinite(loss) or not all(np.all(np.isfinite(w)) for w in W):
            raise DivergenceError(f"member {b} diverged during training")
        members.append(start.from_arrays([a for pair in zip(W, bias) for a in pair]))
        losses.append(float(loss))
    return DynamicsEnsemble(members, config, held, train, D, J, losses)


def member_predictions(ens: DynamicsEnsemble, x, u) -> np.ndarray:
    """Member outputs, shape ``(B, D)`` for vectors or ``(B, n, D)`` for batches."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape[-1] != ens.state_dim or u.shape[-1] != ens.action_dim:
        raise ShapeError(
            f"expected state dim {ens.state_dim} and action dim {ens.action_dim}, "
            f"got {x.shape[-1]} and {u.shape[-1]}"
        )
    inp = np.concatenate([x, u], axis=-1)
    return np.stack([mlp_forward(m, inp)[0] for m in ens.members])


def predict_mean(ens: DynamicsEnsemble, x, u) -> np.ndarray:
    return member_predictions(ens, x, u).mean(axis=0)


def member_jacobians(ens: DynamicsEnsemble, x0, u0, h: float = 1e-4) -> np.ndarray:
    """Central-difference Jacobians of each member, shape ``(B, D, D + J)``."""
    x0 = np.asarray(x0, dtype=float)
    u0 = np.asarray(u0, dtype=float)
    base = np.concatenate([x0, u0])
    n = base.size
    pts = np.vstack([base + h * np.eye(n), base - h * np.eye(n)])
    D = ens.state_dim
    preds = member_predictions(ens, pts[:, :D], pts[:, D:])  # (B, 2n, D)
    jac = (preds[:, :n, :] - preds[:, n:, :]) / (2.0 * h)  # (B, n, D)
    jac = np.transpose(jac, (0, 2, 1))
    if not np.all(np.isfinite(jac)):
        raise DivergenceError("non-finite Jacobian")
    return jac


def linearize(ens: DynamicsEnsemble, x0, u0, h: float = 1e-4) -> Linearization:
    """Affine point model ``x' ~ A x + B u + c`` around ``(x0, u0)`` plus Jacobian spread."""
    x0 = np.asarray(x0, dtype=float)
    u0 = np.asarray(u0, dtype=float)
    D = ens.state_dim
    jac = member_jacobians(ens, x0, u0, h)
    mean_j = jac.mean(axis=0)
    std_j = jac.std(axis=0)
    A, B = mean_j[:, :D], mean_j[:, D:]
    c = predict_mean(ens, x0, u0) - A @ x0 - B @ u0
    return Linearization(A, B, c, std_j[:, :D], std_j[:, D:], residual_std(ens))


def residual_std(ens: DynamicsEnsemble) -> np.ndarray:
    """Per-dimension RMS prediction error, on held-out samples when available."""
    data = ens.eval_set if ens.eval_set else ens.train_set
    if not data:
        return np.zeros(ens.state_dim)
    X, Y = _arrays(data)
    D = ens.state_dim
    err = predict_mean(ens, X[:, :D], X[:, D:]) - Y
    return np.sqrt(np.mean(err * err, axis=0))


def heldout_mse(ens: DynamicsEnsemble, eval_set: Sequence[TransitionSample]) -> float:
    """Mean squared prediction error per sample and dimension."""
    if len(eval_set) == 0:
        raise ValueError("evaluation set is empty")
    X, Y = _arrays(eval_set)
    D = ens.state_dim
    err = predict_mean(ens, X[:, :D], X[:, D:]) - Y
    return float(np.mean(err * err))


def linear_member(A, B, c=None) -> MlpParams:
    """Exact linear member ``x' = A x + B u + c`` as a one-layer identity MLP."""
    from .nn import Dense
    A, B = np.asarray(A, dtype=float), np.asarray(B, dtype=float)
    c = np.zeros(A.shape[0]) if c is None else np.asarray(c, dtype=float)
    return MlpParams([Dense(np.hstack([A, B]), c, "identity")])


def from_members(members: Sequence[MlpParams], state_dim: int, action_dim: int,
                 config: EnsembleConfig | None = None, eval_set=(), train_set=()) -> DynamicsEnsemble:
    cfg = config or EnsembleConfig(n_members=max(2, len(members)))
    if len(members) != cfg.n_members:
        cfg = replace(cfg, n_members=len(members))
    return DynamicsEnsemble(list(members), cfg, list(eval_set), list(train_set),
                            state_dim, action_dim)
