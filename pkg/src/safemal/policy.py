"""Safe action selection: acquisition objective under linearized chance constraints.

The action block ``U`` (``T'`` steps of ``J`` actions) is chosen to maximise

    lambda1 * Q(U, z) - Lambda * sum_d s_d - mu * sum_d load_d / r_d

subject to, for every state dimension ``d``,

    |E[x_{t+T}]_d - x^r_d| + z_d * std_d(U) <= r_d + s_d,   s_d >= 0,

where ``z_d`` is the Gaussian quantile at ``1 - eps_d`` and ``std_d`` is an L1
upper bound on the predicted standard deviation. ``load_d`` is the left-hand
side; the small ``mu`` term makes the passive setting ``lambda1 = 0`` pick the
action with the most safety margin instead of an arbitrary feasible vertex.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .acquisition import (
    AcquisitionParams, History, InfeasibleSolveError, encode_context, q_baseline, q_forward,
    q_values,
)
from .dynamics import Linearization
from .milp import (
    LinExpr, MilpModel, Status, abs_upper, activation_fixings, bb_solve, encode_q_network,
    expr_bounds,
)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Gaussian quantile

_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)
_P_LOW = 0.02425


def normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def gaussian_quantile(p: float) -> float:
    """Inverse standard normal CDF: rational approximation plus a Newton step."""
    p = float(p)
    if not 0.0 < p < 1.0:
        raise ValueError(f"quantile needs 0 < p < 1, got {p}")
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        x = (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    elif p <= 1.0 - _P_LOW:
        q = p - 0.5
        r = q * q
        x = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / \
            (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0)
    else:
        q = math.sqrt(-2.0 * math.log1p(-p))
        x = -(((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    # Newton polish; the tail form of the residual keeps precision for p near 1
    pdf = math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    if pdf > 0.0:
        if p > 0.5:
            resid = (1.0 - p) - 0.5 * math.erfc(x / math.sqrt(2.0))
            x -= resid / pdf
        else:
            x -= (normal_cdf(x) - p) / pdf
    return x


# ---------------------------------------------------------------------------
# specification


@dataclass
class SafetySpec:
    x_ref: np.ndarray
    radius: np.ndarray
    epsilon: np.ndarray
    horizon: int
    action_lo: np.ndarray  # per action dimension, shared by every step
    action_hi: np.ndarray

    def __post_init__(self):
        self.x_ref = np.asarray(self.x_ref, dtype=float).reshape(-1)
        D = self.x_ref.size
        self.radius = np.broadcast_to(np.asarray(self.radius, dtype=float), (D,)).copy()
        self.epsilon = np.broadcast_to(np.asarray(self.epsilon, dtype=float), (D,)).copy()
        self.action_lo = np.asarray(self.action_lo, dtype=float).reshape(-1)
        self.action_hi = np.asarray(self.action_hi, dtype=float).reshape(-1)
        if np.any(self.radius <= 0):
            raise ValueError("radius must be positive")
        if np.any(self.epsilon <= 0) or np.any(self.epsilon > 0.5):
            raise ValueError("epsilon must lie in (0, 0.5]")
        if int(self.horizon) != self.horizon or self.horizon < 0:
            raise ValueError("horizon must be a nonnegative integer")
        self.horizon = int(self.horizon)
        if self.action_lo.shape != self.action_hi.shape or np.any(self.action_lo > self.action_hi):
            raise ValueError("action box needs lo <= hi with matching shapes")

    @property
    def steps(self) -> int:
        """Action steps per decision."""
        return max(self.horizon, 1)

    def flat_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return np.tile(self.action_lo, self.steps), np.tile(self.action_hi, self.steps)

    def quantiles(self) -> np.ndarray:
        return np.array([gaussian_quantile(1.0 - e) for e in self.epsilon])


@dataclass
class PolicyConfig:
    lambda1: float = 1.0
    slack_penalty: float = 100.0
    baseline_samples: int = 64
    gamma_quadratic: np.ndarray | None = None  # (D, J) surcharge on u^2
    gamma_segments: int = 4
    margin_weight: float = 1e-4
    node_limit: int = 1000
    gap: float = 1e-6
    tighten_bounds: bool = True
    subtract_baseline: bool = True
    baseline_seed: int = 0

    def __post_init__(self):
        for name in ("lambda1", "slack_penalty", "margin_weight"):
            v = getattr(self, name)
            if not v >= 0 or (np.isnan(v)):
                raise ValueError(f"{name} must be nonnegative")
        if not np.isfinite(self.lambda1) or not np.isfinite(self.margin_weight):
            raise ValueError("lambda1 and margin_weight must be finite")
        if self.baseline_samples < 1:
            raise ValueError("baseline_samples must be positive")
        if self.gamma_quadratic is not None:
            g = np.asarray(self.gamma_quadratic, dtype=float)
            if np.any(g < 0) or not np.all(np.isfinite(g)):
                raise ValueError("gamma_quadratic must be finite and nonnegative")
            self.gamma_quadratic = g
        if self.gamma_segments < 1:
            raise ValueError("gamma_segments must be positive")


# ---------------------------------------------------------------------------
# mean propagation


@dataclass
class AffineMap:
    """``x = M_x x_t + sum_k M_u[k] u_k + m_0``."""
    M_x: np.ndarray
    M_u: list
    m_0: np.ndarray

    def evaluate(self, x_t, U_flat) -> np.ndarray:
        U_flat = np.asarray(U_flat, dtype=float).reshape(-1)
        out = self.M_x @ np.asarray(x_t, dtype=float) + self.m_0
        if self.M_u:
            J = self.M_u[0].shape[1]
            for k, M in enumerate(self.M_u):
                out = out + M @ U_flat[k * J:(k + 1) * J]
        return out


def propagate_mean(lin: Linearization, x_t, T: int) -> AffineMap:
    """Affine map of ``x_{t+T}`` under ``x_{k+1} = A x_k + B u_k + c``."""
    if T < 0:
        raise ValueError("T must be nonnegative")
    D = lin.state_dim
    M_x = np.eye(D)
    m_0 = np.zeros(D)
    M_u: list = []
    for _ in range(T):
        M_x = lin.A_bar @ M_x
        M_u = [lin.A_bar @ M for M in M_u] + [lin.B_bar.copy()]
        m_0 = lin.A_bar @ m_0 + lin.c_bar
    return AffineMap(M_x, M_u, m_0)


def _mean_exprs(amap: AffineMap, x_t, u_vars: list, J: int) -> list[LinExpr]:
    const = amap.M_x @ np.asarray(x_t, dtype=float) + amap.m_0
    exprs = []
    for d in range(const.size):
        e = LinExpr(constant=const[d])
        for k, M in enumerate(amap.M_u):
            for j in range(J):
                if M[d, j] != 0.0:
                    e = e.add(LinExpr.var(u_vars[k * J + j]), M[d, j])
        exprs.append(e)
    return exprs


# ---------------------------------------------------------------------------
# chance constraints


@dataclass
class ChanceTerms:
    slacks: list
    loads: list  # LinExpr left-hand side per dimension
    deviations: list  # |mean deviation| expression per dimension
    spreads: list  # std upper bound expression per dimension (without the quantile)
    noise: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _quadratic_surcharge(model: MilpModel, u: int, lo: float, hi: float, segments: int) -> LinExpr:
    """Variable ``w >= u^2`` through the chords of ``segments`` equal pieces."""
    w = model.add_var(0.0, max(lo * lo, hi * hi), name=f"sq.x{u}")
    knots = np.linspace(lo, hi, segments + 1)
    for a, b in zip(knots[:-1], knots[1:]):
        slope = a + b
        # chord through (a, a^2) and (b, b^2): w >= slope * u - a * b
        model.add_constr(LinExpr({w: 1.0, u: -slope}), ">=", -a * b)
    return LinExpr.var(w)


def build_chance_constraints(model: MilpModel, lin: Linearization, x_t, spec: SafetySpec,
                             cfg: PolicyConfig, u_vars: list) -> ChanceTerms:
    """Add the per-dimension return constraints; returns slacks and left-hand sides.

    Spread bound: linearizing the ``T``-step rollout in the parameter errors
    gives ``dx_T = sum_k G_k (dA x_k + dB u_k) + noise`` with ``G_k = A^{T-1-k}``.
    With independent entry errors the standard deviation is bounded by the
    L1 form ``sum_k sum_q (|G_k| sigma_A)_{dq} |x_kq| + (|G_k| sigma_B)_{dj} |u_kj|``,
    which reduces to the one-step formula at ``T = 1``. Process noise adds its
    exact standard deviation.
    """
    x_t = np.asarray(x_t, dtype=float)
    D, J = lin.state_dim, lin.action_dim
    T = spec.horizon
    if spec.x_ref.size != D or x_t.size != D:
        raise ValueError("state dimension mismatch between spec, state and model")
    if spec.action_lo.size != J:
        raise ValueError("action box dimension mismatch")
    if not (np.all(np.isfinite(spec.action_lo)) and np.all(np.isfinite(spec.action_hi))):
        raise ValueError("action box must be bounded")
    if len(u_vars) != J * spec.steps:
        raise ValueError(f"expected {J * spec.steps} action variables, got {len(u_vars)}")
    zq = spec.quantiles()
    lower, upper = model.lower, model.upper

    # mean state at each step
    means = [[LinExpr(constant=float(v)) for v in x_t]]
    for k in range(1, T + 1):
        means.append(_mean_exprs(propagate_mean(lin, x_t, k), x_t, u_vars, J))

    # |x_kq| for k >= 1 and |u_kj| epigraphs, created lazily and shared across d
    abs_x: dict = {}
    abs_u: dict = {}

    def ax(k, q):
        if k == 0:
            return LinExpr(constant=abs(float(x_t[q])))
        if (k, q) not in abs_x:
            lo, hi = expr_bounds(means[k][q], lower, upper)
            abs_x[(k, q)] = abs_upper(model, means[k][q], lo, hi, f"abs.x{k}.{q}")
        return abs_x[(k, q)]

    def au(k, j):
        if (k, j) not in abs_u:
            v = u_vars[k * J + j]
            abs_u[(k, j)] = abs_upper(model, LinExpr.var(v), lower[v], upper[v], f"abs.u{k}.{j}")
        return abs_u[(k, j)]

    G = [np.linalg.matrix_power(lin.A_bar, T - 1 - k) for k in range(T)]
    SA = [np.abs(g) @ lin.sigma_state for g in G]
    SB = [np.abs(g) @ lin.sigma_action for g in G]
    noise = np.sqrt(np.array([
        sum(float(np.sum((g[d] * lin.noise_std) ** 2)) for g in G) for d in range(D)
    ])) if T > 0 else np.zeros(D)

    quad = None
    if cfg.gamma_quadratic is not None and np.any(cfg.gamma_quadratic > 0) and T > 0:
        quad = {}
        for k in range(spec.steps):
            for j in range(J):
                v = u_vars[k * J + j]
                quad[(k, j)] = _quadratic_surcharge(model, v, lower[v], upper[v], cfg.gamma_segments)

    slacks, loads, devs, spreads = [], [], [], []
    fixed = not np.isfinite(cfg.slack_penalty)
    for d in range(D):
        dev_expr = means[T][d] - LinExpr.const(spec.x_ref[d])
        lo, hi = expr_bounds(dev_expr, lower, upper)
        dev = abs_upper(model, dev_expr, lo, hi, f"abs.dev{d}")
        spread = LinExpr()
        for k in range(T):
            for q in range(D):
                if SA[k][d, q] != 0.0:
                    spread = spread.add(ax(k, q), SA[k][d, q])
            for j in range(J):
                if SB[k][d, j] != 0.0:
                    spread = spread.add(au(k, j), SB[k][d, j])
        load = dev.add(spread, zq[d]) + LinExpr.const(zq[d] * noise[d])
        if quad is not None:
            g = cfg.gamma_quadratic
            for (k, j), w in quad.items():
                if g[d, j] > 0:
                    load = load.add(w, g[d, j])
        s = model.add_var(0.0, 0.0 if fixed else np.inf, name=f"slack{d}")
        model.add_constr(load - LinExpr.var(s), "<=", spec.radius[d])
        slacks.append(s)
        loads.append(load)
        devs.append(dev)
        spreads.append(spread)
    return ChanceTerms(slacks, loads, devs, spreads, noise)


def chance_loads(lin: Linearization, x_t, spec: SafetySpec, U_flat,
                 gamma_quadratic=None) -> np.ndarray:
    """Numeric left-hand sides of the return constraints for a fixed action block.

    Same bound as the encoded constraints with exact ``|.|`` and ``u^2``, so a
    block is feasible without slack iff every entry is ``<= spec.radius``.
    """
    x_t = np.asarray(x_t, dtype=float)
    U = np.asarray(U_flat, dtype=float).reshape(spec.steps, lin.action_dim)
    T = spec.horizon
    D = lin.state_dim
    xs = [x_t]
    for k in range(T):
        xs.append(lin.A_bar @ xs[-1] + lin.B_bar @ U[k] + lin.c_bar)
    dev = np.abs(xs[T] - spec.x_ref)
    spread = np.zeros(D)
    noise_var = np.zeros(D)
    for k in range(T):
        g = np.linalg.matrix_power(lin.A_bar, T - 1 - k)
        spread += np.abs(g) @ lin.sigma_state @ np.abs(xs[k])
        spread += np.abs(g) @ lin.sigma_action @ np.abs(U[k])
        noise_var += (g * lin.noise_std) ** 2 @ np.ones(D)
    load = dev + spec.quantiles() * (spread + np.sqrt(noise_var))
    if gamma_quadratic is not None and T > 0:
        load = load + np.asarray(gamma_quadratic) @ np.sum(U ** 2, axis=0)
    return load


def is_block_safe(lin: Linearization, x_t, spec: SafetySpec, U_flat, tol: float = 1e-9) -> bool:
    return bool(np.all(chance_loads(lin, x_t, spec, U_flat) <= spec.radius + tol))


# ---------------------------------------------------------------------------
# solve


@dataclass
class PolicyDiagnostics:
    status: str
    objective: float
    q_value: float
    q_bar: float
    slack: float
    nodes: int
    iterations: int
    wall_ms: float
    n_binaries: int


def build_policy_model(acq: AcquisitionParams | None, z, lin: Linearization, x_t,
                       spec: SafetySpec, cfg: PolicyConfig, q_bar: float = 0.0):
    model = MilpModel()
    lo, hi = spec.flat_bounds()
    u_vars = [model.add_var(lo[i], hi[i], name=f"u{i}") for i in range(lo.size)]
    terms = build_chance_constraints(model, lin, x_t, spec, cfg, u_vars)
    obj = LinExpr()
    enc = None
    if cfg.lambda1 > 0:
        enc = encode_q_network(model, acq.q_head, z, u_vars, lo, hi, tighten=cfg.tighten_bounds)
        obj = obj.add(LinExpr.var(enc.q_var), cfg.lambda1)
        if cfg.subtract_baseline:
            obj = obj + LinExpr.const(-cfg.lambda1 * q_bar)
    if np.isfinite(cfg.slack_penalty) and cfg.slack_penalty > 0:
        for s in terms.slacks:
            obj = obj.add(LinExpr.var(s), -cfg.slack_penalty)
    if cfg.margin_weight > 0:
        for d, load in enumerate(terms.loads):
            obj = obj.add(load, -cfg.margin_weight / spec.radius[d])
    model.set_objective(obj)
    return model, u_vars, terms, enc


def solve_policy(acq: AcquisitionParams, history: History, lin: Linearization, x_t,
                 spec: SafetySpec, cfg: PolicyConfig) -> tuple[np.ndarray, PolicyDiagnostics]:
    """Exact MILP maximiser of the safe acquisition objective; returns the full block."""
    t0 = time.perf_counter()
    z = encode_context(acq, history)
    lo, hi = spec.flat_bounds()
    if acq.n_actions != lo.size:
        raise ValueError(f"acquisition scores {acq.n_actions} actions, spec has {lo.size}")
    q_bar = q_baseline(acq.q_head, z, lo, hi, cfg.baseline_samples, cfg.baseline_seed)
    model, u_vars, terms, enc = build_policy_model(acq, z, lin, x_t, spec, cfg, q_bar)
    heuristic = (lambda x: activation_fixings(enc, x)) if enc is not None else None
    sol = bb_solve(model, node_limit=cfg.node_limit, gap=cfg.gap, heuristic=heuristic)
    if sol.status == Status.ITER_LIMIT:
        log.warning("policy solve hit the node limit; using the incumbent")
    elif sol.status != Status.OPTIMAL:
        raise InfeasibleSolveError(f"policy MILP returned {sol.status.value}")
    U = np.clip(sol.x[u_vars], lo, hi)
    wall = (time.perf_counter() - t0) * 1e3
    diag = PolicyDiagnostics(
        status=sol.status.value,
        objective=float(sol.objective),
        q_value=q_forward(acq.q_head, z, U),
        q_bar=q_bar,
        slack=float(np.sum(sol.x[terms.slacks])),
        nodes=sol.nodes,
        iterations=sol.iterations,
        wall_ms=wall,
        n_binaries=int(np.sum(model.binary)),
    )
    return U, diag


def enumerate_policy_1d(acq: AcquisitionParams, history: History, candidates, gp_safety,
                        spec: SafetySpec, cfg: PolicyConfig) -> tuple[float, dict]:
    """Grid version for a scalar action with immediate safety.

    Candidates whose lower confidence bound ``mean - z * std`` is negative are
    discarded; the best survivor by ``lambda1 * (Q - Qbar)`` wins, ties to the
    lowest index. Without survivors the largest margin wins.
    """
    cands = np.asarray(candidates, dtype=float).reshape(-1)
    if cands.size == 0:
        raise ValueError("candidate grid is empty")
    mean, std = (np.asarray(a, dtype=float).reshape(-1) for a in gp_safety)
    if mean.size != cands.size or std.size != cands.size:
        raise ValueError("safety arrays must match the candidate grid")
    zq = gaussian_quantile(1.0 - float(np.min(spec.epsilon)))
    margin = mean - zq * std
    safe = margin >= 0.0
    if not np.any(safe):
        i = int(np.argmax(margin))
        return float(cands[i]), {"index": i, "fallback": True, "n_safe": 0, "q_bar": 0.0}
    z = encode_context(acq, history)
    q = q_values(acq.q_head, z, cands[:, None])
    q_bar = float(np.mean(q))
    score = np.where(safe, cfg.lambda1 * (q - q_bar), -np.inf)
    i = int(np.argmax(score))
    return float(cands[i]), {"index": i, "fallback": False, "n_safe": int(safe.sum()),
                             "q_bar": q_bar, "q_value": float(q[i])}
