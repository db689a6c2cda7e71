"""Evaluation domains.

* Aircraft: a damaged discrete-time linear system. Damage scales control
  columns of ``B`` (surface loss) and perturbs ``A``.
* ADMETS: synthetic stimulation subjects. A smooth score curve over a scalar
  amplitude is sampled, a Gaussian process is fitted to a sweep of it, and the
  GP mean is the ground truth. Scores below zero are unsafe side effects.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, solve_triangular

# ---------------------------------------------------------------------------
# aircraft

_A_LONG = np.array([[0.80, 0.05, 0.00],
                    [-0.05, 0.75, 0.10],
                    [0.00, -0.10, 0.70]])
_A_LAT = np.array([[0.78, 0.00, -0.08],
                   [0.00, 0.70, 0.05],
                   [0.06, -0.04, 0.75]])
# columns: throttle, elevator, aileron, rudder
_B_NOM = np.array([[0.50, 0.08, 0.00, 0.00],
                   [0.08, 0.42, 0.00, 0.00],
                   [0.00, 0.56, 0.00, 0.00],
                   [0.00, 0.00, 0.08, 0.42],
                   [0.00, 0.00, 0.56, 0.08],
                   [0.00, 0.00, 0.08, 0.50]])


def nominal_aircraft(D: int = 6, J: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Trim-point linear model; the 6x4 default couples longitudinal and lateral blocks weakly."""
    if (D, J) == (6, 4):
        A = np.zeros((6, 6))
        A[:3, :3] = _A_LONG
        A[3:, 3:] = _A_LAT
        A[0, 3] = A[3, 0] = 0.02
        return A, _B_NOM.copy()
    if not (1 <= D <= 12 and 1 <= J <= 12):
        raise ValueError("aircraft dimensions must be within 1..12")
    rng = np.random.default_rng(12345 + 100 * D + J)
    Q, _ = np.linalg.qr(rng.normal(size=(D, D)))
    A = Q @ np.diag(rng.uniform(0.6, 0.8, D)) @ Q.T
    B = 0.5 * rng.normal(size=(D, J)) / np.sqrt(J)
    return A, B


@dataclass(frozen=True)
class AircraftConfig:
    state_dim: int = 6
    action_dim: int = 4
    noise_std: float = 0.02
    damage_scale: float = 1.0  # 0 returns the nominal system
    column_factor: tuple = (0.0, 0.7)
    a_perturb: float = 0.2
    rho_max: float = 1.05
    action_bound: float = 1.0
    probe_points: int = 200


@dataclass
class AircraftParams:
    A_true: np.ndarray
    B_true: np.ndarray
    c_true: np.ndarray
    noise_std: np.ndarray
    action_lo: np.ndarray
    action_hi: np.ndarray
    damaged_columns: tuple = ()

    def __post_init__(self):
        if np.any(self.noise_std < 0):
            raise ValueError("noise std must be nonnegative")

    @property
    def state_dim(self) -> int:
        return self.A_true.shape[0]

    @property
    def action_dim(self) -> int:
        return self.B_true.shape[1]


def spectral_radius(A) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(A))))


def sample_damage(seed, cfg: AircraftConfig = AircraftConfig()) -> AircraftParams:
    """Nominal system with 1-2 weakened control columns and perturbed ``A``."""
    A, B = nominal_aircraft(cfg.state_dim, cfg.action_dim)
    D, J = A.shape[0], B.shape[1]
    cols: tuple = ()
    if cfg.damage_scale > 0:
        rng = np.random.default_rng(seed)
        k = int(rng.integers(1, min(2, J) + 1))
        cols = tuple(sorted(int(c) for c in rng.choice(J, size=k, replace=False)))
        lo, hi = cfg.column_factor
        for c in cols:
            f = rng.uniform(lo, hi)
            B[:, c] *= 1.0 - cfg.damage_scale * (1.0 - f)
        A = A * (1.0 + cfg.damage_scale * cfg.a_perturb * rng.uniform(-1, 1, size=A.shape))
        rho = spectral_radius(A)
        if rho > cfg.rho_max:
            A = A * (cfg.rho_max / rho)
    bound = cfg.action_bound
    return AircraftParams(A, B, np.zeros(D), np.full(D, cfg.noise_std),
                          np.full(J, -bound), np.full(J, bound), cols)


def aircraft_step(params: AircraftParams, x, u, noise_seed) -> np.ndarray:
    """One transition ``A x + B u + c + noise``; actions outside the box are rejected."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if u.shape != (params.action_dim,) or x.shape != (params.state_dim,):
        raise ValueError("state or action has the wrong shape")
    tol = 1e-9
    if np.any(u < params.action_lo - tol) or np.any(u > params.action_hi + tol):
        raise ValueError(f"action {u} outside the actuator box")
    noise = np.random.default_rng(noise_seed).normal(size=params.state_dim) * params.noise_std
    return params.A_true @ x + params.B_true @ u + params.c_true + noise


def aircraft_probe(params: AircraftParams, n: int = 200, seed: int = 0):
    """Fixed query set ``(X, U, truth)`` for the model-error metric (noise free)."""
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, size=(n, params.state_dim))
    U = rng.uniform(params.action_lo, params.action_hi, size=(n, params.action_dim))
    Y = X @ params.A_true.T + U @ params.B_true.T + params.c_true
    return X, U, Y


# ---------------------------------------------------------------------------
# Gaussian process


@dataclass(frozen=True)
class GpHyper:
    lengthscale: float = 0.1
    signal_var: float = 1.0
    noise_var: float = 1e-4

    def __post_init__(self):
        if min(self.lengthscale, self.signal_var, self.noise_var) <= 0:
            raise ValueError("GP hyperparameters must be positive")


@dataclass
class GpModel:
    inputs: np.ndarray  # (n, 1)
    targets: np.ndarray  # (n,)
    hyper: GpHyper
    chol: tuple = field(repr=False)
    alpha: np.ndarray = field(repr=False)

    @property
    def lengthscale(self):
        return self.hyper.lengthscale

    @property
    def signal_var(self):
        return self.hyper.signal_var

    @property
    def noise_var(self):
        return self.hyper.noise_var


def rbf(a, b, hyper: GpHyper) -> np.ndarray:
    a = np.asarray(a, dtype=float).reshape(-1, 1)
    b = np.asarray(b, dtype=float).reshape(-1, 1)
    d = a - b.T
    return hyper.signal_var * np.exp(-0.5 * d * d / hyper.lengthscale ** 2)


def fit_gp(X, y, hyper: GpHyper = GpHyper()) -> GpModel:
    X = np.asarray(X, dtype=float).reshape(-1, 1)
    y = np.asarray(y, dtype=float).reshape(-1)
    if X.shape[0] < 1 or X.shape[0] != y.size:
        raise ValueError("need at least one observation with matching targets")
    K = rbf(X, X, hyper) + (hyper.noise_var + 1e-8) * np.eye(X.shape[0])
    try:
        chol = cho_factor(K, lower=True)
    except LinAlgError as exc:
        raise ValueError("kernel matrix is not positive definite after jitter") from exc
    return GpModel(X, y, hyper, chol, cho_solve(chol, y))


def gp_posterior(gp: GpModel, query) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and standard deviation of the latent function."""
    q = np.asarray(query, dtype=float).reshape(-1)
    Ks = rbf(q, gp.inputs, gp.hyper)
    mean = Ks @ gp.alpha
    L = np.tril(gp.chol[0])
    v = solve_triangular(L, Ks.T, lower=True)
    var = gp.hyper.signal_var - np.sum(v * v, axis=0)
    return mean, np.sqrt(np.maximum(var, 0.0))


# ---------------------------------------------------------------------------
# ADMETS surrogate

SUBJECT_HYPER = GpHyper(lengthscale=0.06, signal_var=1.0, noise_var=1e-4)


@dataclass
class AdmetsSubject:
    gp: GpModel
    grid: np.ndarray
    a_star: float
    noise_std: float
    truth: np.ndarray  # GP mean on the grid

    @property
    def span(self) -> float:
        return float(self.grid[-1] - self.grid[0])

    def mean(self, amplitude) -> np.ndarray:
        return gp_posterior(self.gp, amplitude)[0]


def _bumps(a, centers, widths, heights):
    a = np.asarray(a, dtype=float)[..., None]
    return np.sum(heights * np.exp(-0.5 * ((a - centers) / widths) ** 2), axis=-1)


def admets_subject(seed, n_grid: int = 101, noise_std: float = 0.05,
                   safe_edge: float = 0.25) -> AdmetsSubject:
    """Random subject: positive bumps plus one dip below zero; low amplitudes are safe."""
    rng = np.random.default_rng(seed)
    grid = np.linspace(0.0, 1.0, n_grid)
    sweep = np.linspace(0.0, 1.0, 25)
    for _ in range(1000):
        n_pos = int(rng.integers(1, 4))
        centers = rng.uniform(0.15, 0.95, n_pos)
        widths = rng.uniform(0.06, 0.2, n_pos)
        heights = rng.uniform(0.4, 1.5, n_pos)
        base = rng.uniform(0.1, 0.3)
        dc = rng.uniform(safe_edge + 0.15, 0.9)
        dw = rng.uniform(0.05, 0.1)
        raw = base + _bumps(dc, centers, widths, heights)
        dh = raw + rng.uniform(0.3, 0.8)
        c = np.concatenate([centers, [dc]])
        w = np.concatenate([widths, [dw]])
        h = np.concatenate([heights, [-dh]])
        curve = base + _bumps(sweep, c, w, h)
        gp = fit_gp(sweep, curve, SUBJECT_HYPER)
        truth = gp_posterior(gp, grid)[0]
        low = grid <= safe_edge
        if truth.min() < 0 and truth[low].min() > 0.05:
            break
    else:  # pragma: no cover - construction succeeds well before this
        raise RuntimeError("could not construct a subject")
    a_star = float(grid[int(np.argmax(truth))])
    return AdmetsSubject(gp, grid, a_star, noise_std, truth)


def admets_step(subject: AdmetsSubject, amplitude: float, seed) -> tuple[float, bool]:
    """Noisy score at ``amplitude`` and whether the true mean is an unsafe side effect."""
    a = float(amplitude)
    if not subject.grid[0] - 1e-12 <= a <= subject.grid[-1] + 1e-12:
        raise ValueError(f"amplitude {a} outside [{subject.grid[0]}, {subject.grid[-1]}]")
    mean = float(subject.mean(a)[0])
    noise = np.random.default_rng(seed).normal() * subject.noise_std
    return mean + noise, mean < 0.0


def optimum_error(subject: AdmetsSubject, estimate: float) -> float:
    return abs(float(estimate) - subject.a_star) / subject.span
