"""Small dense LP/MILP toolkit.

``MilpModel`` collects bounded variables, linear constraints and a linear
objective to *maximise*. ``lp_solve`` runs a two-phase primal simplex (Bland's
rule, bounded-variable standard form) and ``bb_solve`` runs best-first
branch-and-bound over the binary variables. The ``encode_*`` helpers add exact
big-M encodings of ReLU and absolute-value expressions using per-neuron
interval bounds.
"""
from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable

import numpy as np

from . import kernels
from .nn import Dense, MlpParams

log = logging.getLogger(__name__)

PIVOT_TOL = 1e-9
FEAS_TOL = 1e-7
INT_TOL = 1e-6
BOUND_LIMIT = 1e6


class ModelError(ValueError):
    """Malformed model: bad variable reference, bounds or coefficients."""


class BoundExplosionError(ValueError):
    """Interval bounds grew past the big-M safety limit."""


class Status(str, Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    ITER_LIMIT = "IterLimit"


class LinExpr:
    """Sparse affine expression ``sum(coef * x[var]) + constant``."""

    __slots__ = ("terms", "constant")

    def __init__(self, terms: dict | None = None, constant: float = 0.0):
        self.terms = {} if terms is None else {int(v): float(c) for v, c in terms.items()}
        self.constant = float(constant)

    @classmethod
    def var(cls, vid: int, coef: float = 1.0) -> "LinExpr":
        return cls({vid: float(coef)})

    @classmethod
    def const(cls, value: float) -> "LinExpr":
        return cls({}, value)

    @classmethod
    def dot(cls, coefs: Iterable[float], exprs: Iterable["LinExpr"],
            constant: float = 0.0) -> "LinExpr":
        out = cls({}, constant)
        for c, e in zip(coefs, exprs):
            if c != 0.0:
                out.add(e, c)
        return out

    def add(self, other: "LinExpr", scale: float = 1.0) -> "LinExpr":
        """In-place ``self += scale * other``."""
        for v, c in other.terms.items():
            self.terms[v] = self.terms.get(v, 0.0) + scale * c
        self.constant += scale * other.constant
        return self

    def __add__(self, other):
        if isinstance(other, (int, float)):
            return LinExpr(self.terms, self.constant + other)
        return LinExpr(self.terms, self.constant).add(other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return LinExpr(self.terms, self.constant - other)
        return LinExpr(self.terms, self.constant).add(other, -1.0)

    def __neg__(self):
        return self * -1.0

    def __mul__(self, k: float):
        return LinExpr({v: c * k for v, c in self.terms.items()}, self.constant * k)

    __rmul__ = __mul__

    def value(self, x) -> float:
        return self.constant + sum(c * x[v] for v, c in self.terms.items())

    def __repr__(self):
        body = " + ".join(f"{c:g}*x{v}" for v, c in sorted(self.terms.items()))
        return f"LinExpr({body or '0'} + {self.constant:g})"


@dataclass
class Constraint:
    expr: LinExpr
    sense: str  # "<=", "==", ">="
    rhs: float = 0.0


@dataclass
class MilpModel:
    lower: list = field(default_factory=list)
    upper: list = field(default_factory=list)
    binary: list = field(default_factory=list)
    names: list = field(default_factory=list)
    constraints: list = field(default_factory=list)
    objective: LinExpr = field(default_factory=LinExpr)

    @property
    def n_vars(self) -> int:
        return len(self.lower)

    def add_var(self, lower: float = 0.0, upper: float = np.inf, binary: bool = False,
                name: str | None = None) -> int:
        if binary:
            lower, upper = 0.0, 1.0
        if np.isnan(lower) or np.isnan(upper) or lower > upper:
            raise ModelError(f"invalid bounds [{lower}, {upper}] for {name or 'var'}")
        self.lower.append(float(lower))
        self.upper.append(float(upper))
        self.binary.append(bool(binary))
        self.names.append(name or f"x{len(self.lower) - 1}")
        return len(self.lower) - 1

    def add_constr(self, expr: LinExpr, sense: str, rhs: float = 0.0) -> int:
        if sense not in ("<=", "==", ">="):
            raise ModelError(f"unknown sense {sense!r}")
        self.constraints.append(Constraint(expr, sense, float(rhs)))
        return len(self.constraints) - 1

    def set_objective(self, expr: LinExpr):
        self.objective = expr

    def validate(self):
        n = self.n_vars
        for k, con in enumerate(self.constraints):
            for v, c in con.expr.terms.items():
                if not (0 <= v < n):
                    raise ModelError(f"constraint {k} references unknown variable {v}")
                if not np.isfinite(c):
                    raise ModelError(f"constraint {k} has non-finite coefficient")
            if not np.isfinite(con.rhs) or not np.isfinite(con.expr.constant):
                raise ModelError(f"constraint {k} has non-finite right-hand side")
        for v, c in self.objective.terms.items():
            if not (0 <= v < n) or not np.isfinite(c):
                raise ModelError(f"objective term x{v} is invalid")

    def violations(self, x, tol: float = 1e-6) -> list[str]:
        """Human-readable list of constraint/bound violations at ``x``."""
        out = []
        for i in range(self.n_vars):
            if x[i] < self.lower[i] - tol or x[i] > self.upper[i] + tol:
                out.append(f"bound {self.names[i]}={x[i]:.3g} outside "
                           f"[{self.lower[i]:.3g}, {self.upper[i]:.3g}]")
            if self.binary[i] and min(abs(x[i]), abs(x[i] - 1.0)) > tol:
                out.append(f"binary {self.names[i]}={x[i]:.3g} is fractional")
        for k, con in enumerate(self.constraints):
            lhs = con.expr.value(x)
            slack = {"<=": con.rhs - lhs, ">=": lhs - con.rhs,
                     "==": -abs(lhs - con.rhs)}[con.sense]
            if slack < -tol:
                out.append(f"constraint {k} violated by {-slack:.3g}")
        return out

    def dump(self) -> str:
        """Text dump, one record per line.

        Grammar::

            var <id> <name> <lower> <upper> <C|B>
            con <id> <sense> <rhs> : <coef> x<id> ...
            obj max <constant> : <coef> x<id> ...
        """
        lines = []
        for i in range(self.n_vars):
            kind = "B" if self.binary[i] else "C"
            lines.append(f"var {i} {self.names[i]} {self.lower[i]!r} {self.upper[i]!r} {kind}")
        for k, con in enumerate(self.constraints):
            terms = " ".join(f"{c!r} x{v}" for v, c in sorted(con.expr.terms.items()))
            lines.append(f"con {k} {con.sense} {con.rhs - con.expr.constant!r} : {terms}")
        terms = " ".join(f"{c!r} x{v}" for v, c in sorted(self.objective.terms.items()))
        lines.append(f"obj max {self.objective.constant!r} : {terms}")
        return "\n".join(lines) + "\n"


@dataclass
class MilpSolution:
    status: Status
    x: np.ndarray | None = None
    objective: float = float("nan")
    nodes: int = 0
    iterations: int = 0
    state: object = field(default=None, repr=False, compare=False)

    @property
    def assignment(self) -> dict:
        return {} if self.x is None else {i: float(v) for i, v in enumerate(self.x)}


class _Compiled:
    """Dense arrays of a model; bounds are supplied per solve."""

    def __init__(self, model: MilpModel):
        model.validate()
        n, m = model.n_vars, len(model.constraints)
        self.n, self.m = n, m
        self.A = np.zeros((m, n))
        self.b = np.zeros(m)
        self.sense = np.zeros(m, dtype=np.int8)  # -1 <=, 0 ==, +1 >=
        code = {"<=": -1, "==": 0, ">=": 1}
        for k, con in enumerate(model.constraints):
            for v, c in con.expr.terms.items():
                self.A[k, v] += c
            self.b[k] = con.rhs - con.expr.constant
            self.sense[k] = code[con.sense]
        self.c = np.zeros(n)
        for v, c in model.objective.terms.items():
            self.c[v] += c
        self.c0 = model.objective.constant
        self.lower = np.array(model.lower, dtype=float)
        self.upper = np.array(model.upper, dtype=float)
        self.binary = np.flatnonzero(model.binary)


def _pivot(T, d, beta, basis, at_upper, row, col):
    piv = T[row, col]
    T[row] /= piv
    f = T[:, col].copy()
    f[row] = 0.0
    T -= np.outer(f, T[row])
    d -= d[col] * T[row]
    at_upper[basis[row]] = 0
    basis[row] = col


@dataclass
class _LpState:
    """Optimal tableau of a solved node, reusable as a dual-simplex warm start."""
    T: np.ndarray
    d: np.ndarray
    beta: np.ndarray
    basis: np.ndarray
    at_upper: np.ndarray
    ylo: np.ndarray
    yup: np.ndarray
    src: np.ndarray
    sign: np.ndarray
    offset: np.ndarray
    col_of: np.ndarray  # original variable -> its column, or -1 when split

    def copy(self) -> "_LpState":
        return _LpState(self.T.copy(), self.d.copy(), self.beta.copy(), self.basis.copy(),
                        self.at_upper.copy(), self.ylo.copy(), self.yup.copy(), self.src,
                        self.sign, self.offset, self.col_of)


def _extract(cm: _Compiled, st: _LpState, lo, hi) -> np.ndarray:
    y = np.where(st.at_upper != 0, st.yup, st.ylo)
    y[st.basis] = st.beta
    x = st.offset.copy()
    np.add.at(x, st.src, st.sign * y[:st.src.size])
    return np.clip(x, lo, hi)


def _solve(cm: _Compiled, lo: np.ndarray, hi: np.ndarray, max_iter: int,
           keep_state: bool = False) -> MilpSolution:
    if np.any(lo > hi + 1e-12):
        return MilpSolution(Status.INFEASIBLE)
    # x_i = offset_i + sign * y for one or two nonneg columns y
    cols_src, cols_sign, cols_up = [], [], []
    offset = np.zeros(cm.n)
    for i in range(cm.n):
        if np.isfinite(lo[i]):
            offset[i] = lo[i]
            cols_src.append(i); cols_sign.append(1.0); cols_up.append(max(hi[i] - lo[i], 0.0))
        elif np.isfinite(hi[i]):
            offset[i] = hi[i]
            cols_src.append(i); cols_sign.append(-1.0); cols_up.append(np.inf)
        else:
            cols_src += [i, i]; cols_sign += [1.0, -1.0]; cols_up += [np.inf, np.inf]
    src = np.array(cols_src, dtype=np.int64)
    sign = np.array(cols_sign)
    ny = len(src)
    m = cm.m
    Ay = cm.A[:, src] * sign
    rhs = cm.b - cm.A @ offset
    # slack columns for inequality rows
    ineq = np.flatnonzero(cm.sense != 0)
    ns = len(ineq)
    S = np.zeros((m, ns))
    S[ineq, np.arange(ns)] = np.where(cm.sense[ineq] < 0, 1.0, -1.0)
    flip = rhs < 0
    Ay[flip] *= -1.0
    S[flip] *= -1.0
    rhs = np.abs(rhs)
    basis = np.full(m, -1, dtype=np.int64)
    good = S[ineq, np.arange(ns)] > 0
    basis[ineq[good]] = ny + np.arange(ns)[good]
    need_art = np.flatnonzero(basis < 0)
    na = len(need_art)
    Art = np.zeros((m, na))
    Art[need_art, np.arange(na)] = 1.0
    basis[need_art] = ny + ns + np.arange(na)
    T = np.ascontiguousarray(np.hstack([Ay, S, Art]))
    ntot = ny + ns + na
    upper = np.concatenate([np.array(cols_up), np.full(ns + na, np.inf)])
    at_upper = np.zeros(ntot, dtype=np.int8)
    beta = rhs.copy()
    iters = 0
    if na:
        cost = np.zeros(ntot)
        cost[ny + ns:] = 1.0
        d = cost - cost[basis] @ T
        status, it = kernels.bounded_simplex(T, d, beta, basis, at_upper, upper,
                                             ny + ns, max_iter, PIVOT_TOL)
        iters += it
        if status == kernels.ITER_LIMIT:
            return MilpSolution(Status.ITER_LIMIT, iterations=iters)
        art_value = float(np.sum(beta[basis >= ny + ns]))
        if art_value > FEAS_TOL * max(1.0, float(np.max(rhs, initial=0.0))):
            return MilpSolution(Status.INFEASIBLE, iterations=iters)
        # drive zero-valued artificials out of the basis or drop redundant rows
        keep = np.ones(m, dtype=bool)
        for r in np.flatnonzero(basis >= ny + ns):
            is_basic = np.zeros(ntot, dtype=bool)
            is_basic[basis] = True
            cand = np.flatnonzero((np.abs(T[r, :ny + ns]) > 1e-7) & ~is_basic[:ny + ns])
            if cand.size:
                k = int(cand[0])
                val = upper[k] if at_upper[k] else 0.0
                _pivot(T, d, beta, basis, at_upper, r, k)
                beta[r] = val
                at_upper[k] = 0
            else:
                keep[r] = False
        T = np.ascontiguousarray(T[keep][:, :ny + ns])
        beta = beta[keep]
        basis = basis[keep]
        upper = upper[:ny + ns]
        at_upper = at_upper[:ny + ns].copy()
    ntot = ny + ns
    # phase 2: minimise -objective
    cost = np.zeros(ntot)
    cost[:ny] = -(cm.c[src] * sign)
    d = cost - cost[basis] @ T
    status, it = kernels.bounded_simplex(T, d, beta, basis, at_upper, upper,
                                         ntot, max_iter, PIVOT_TOL)
    iters += it
    if status == kernels.UNBOUNDED:
        return MilpSolution(Status.UNBOUNDED, iterations=iters)
    if status == kernels.ITER_LIMIT:
        return MilpSolution(Status.ITER_LIMIT, iterations=iters)
    y = np.where(at_upper[:ntot] != 0, upper, 0.0)
    y[basis] = beta
    x = offset.copy()
    np.add.at(x, src, sign * y[:ny])
    x = np.clip(x, lo, hi)
    sol = MilpSolution(Status.OPTIMAL, x, float(cm.c @ x + cm.c0), nodes=1, iterations=iters)
    if keep_state:
        col_of = np.full(cm.n, -1, dtype=np.int64)
        counts = np.bincount(src, minlength=cm.n)
        single = np.flatnonzero(counts[src] == 1)
        col_of[src[single]] = single
        sol.state = _LpState(T, d, beta, basis, at_upper, np.zeros(ntot), upper.copy(),
                             src, sign, offset, col_of)
    return sol


def _resolve(cm: _Compiled, parent: _LpState, lo: np.ndarray, hi: np.ndarray,
             changed, max_iter: int) -> MilpSolution:
    """Re-optimise ``parent`` after the bounds of variables ``changed`` moved.

    The objective is unchanged, so the parent basis stays dual feasible and a
    few dual pivots restore primal feasibility. Falls back to a cold solve if
    the warm start cannot be used or the result fails verification.
    """
    if np.any(lo > hi + 1e-12):
        return MilpSolution(Status.INFEASIBLE)
    st = parent.copy()
    is_basic = np.zeros(st.ylo.size, dtype=bool)
    is_basic[st.basis] = True
    for v in changed:
        k = st.col_of[v]
        if k < 0:
            return _solve(cm, lo, hi, max_iter, keep_state=True)
        s, off = st.sign[k], st.offset[v]
        a, b = (lo[v] - off, hi[v] - off) if s > 0 else (off - hi[v], off - lo[v])
        if not is_basic[k]:
            old = st.yup[k] if st.at_upper[k] else st.ylo[k]
        st.ylo[k], st.yup[k] = a, b
        if not is_basic[k]:
            if st.at_upper[k] and not np.isfinite(b):
                st.at_upper[k] = 0
            new = st.yup[k] if st.at_upper[k] else st.ylo[k]
            if new != old:
                st.beta -= (new - old) * st.T[:, k]
    status, it = kernels.dual_simplex(st.T, st.d, st.beta, st.basis, st.at_upper,
                                      st.ylo, st.yup, max_iter, PIVOT_TOL)
    if status == kernels.INFEASIBLE:
        return MilpSolution(Status.INFEASIBLE, iterations=it)
    if status != kernels.OPTIMAL:
        return _solve(cm, lo, hi, max_iter, keep_state=True)
    x = _extract(cm, st, lo, hi)
    resid = cm.A @ x - cm.b
    bad = ((cm.sense < 0) & (resid > 1e-6)) | ((cm.sense > 0) & (resid < -1e-6)) | \
        ((cm.sense == 0) & (np.abs(resid) > 1e-6))
    if np.any(bad):
        return _solve(cm, lo, hi, max_iter, keep_state=True)
    sol = MilpSolution(Status.OPTIMAL, x, float(cm.c @ x + cm.c0), nodes=1, iterations=it)
    sol.state = st
    return sol


def lp_solve(model: MilpModel, max_iter: int = 50_000) -> MilpSolution:
    """Solve the LP relaxation (binaries relaxed to [0, 1])."""
    cm = _Compiled(model)
    return _solve(cm, cm.lower.copy(), cm.upper.copy(), max_iter)


def lp_ranges(model: MilpModel, exprs: list, max_iter: int = 50_000) -> tuple[np.ndarray, np.ndarray]:
    """Min and max of each expression over the LP relaxation of ``model``.

    One cold solve, then every further objective restarts the primal simplex
    from the previous optimal basis (the feasible region does not change).
    Returns ``(-inf, inf)`` entries when the relaxation is infeasible or unbounded.
    """
    n = len(exprs)
    lo, hi = np.full(n, -np.inf), np.full(n, np.inf)
    if n == 0:
        return lo, hi
    saved = model.objective
    model.set_objective(LinExpr())
    try:
        cm = _Compiled(model)
    finally:
        model.set_objective(saved)
    root = _solve(cm, cm.lower.copy(), cm.upper.copy(), max_iter, keep_state=True)
    if root.status != Status.OPTIMAL:
        return lo, hi
    st = root.state
    ny = st.src.size
    for i, e in enumerate(exprs):
        for sense in (-1.0, 1.0):
            c = np.zeros(cm.n)
            for v, coef in e.terms.items():
                c[v] += sense * coef
            cost = np.zeros(st.T.shape[1])
            cost[:ny] = -(c[st.src] * st.sign)
            st.d = cost - cost[st.basis] @ st.T
            status, _ = kernels.bounded_simplex(st.T, st.d, st.beta, st.basis, st.at_upper,
                                                st.yup, st.T.shape[1], max_iter, PIVOT_TOL)
            if status != kernels.OPTIMAL:
                continue
            x = _extract(cm, st, cm.lower, cm.upper)
            val = float(sum(coef * x[v] for v, coef in e.terms.items()) + e.constant)
            if sense > 0:
                hi[i] = val
            else:
                lo[i] = val
    return lo, hi


def _fractional(x, binary):
    frac = np.minimum(x[binary] - np.floor(x[binary]), np.ceil(x[binary]) - x[binary])
    return frac


def bb_solve(model: MilpModel, node_limit: int = 100_000, gap: float = 1e-6,
             heuristic: Callable[[np.ndarray], dict] | None = None,
             heuristic_every: int = 10, max_iter: int = 50_000,
             warm_start: bool = True) -> MilpSolution:
    """Best-first branch-and-bound on the binary variables.

    ``heuristic(x_lp)`` may return a dict of binary fixings; the LP under those
    fixings is solved and, if integral, becomes a candidate incumbent. It runs
    at the root and every ``heuristic_every`` nodes. Child LPs are re-solved
    from the parent's optimal tableau by the dual simplex unless
    ``warm_start`` is off.
    """
    cm = _Compiled(model)
    bins = cm.binary
    lo0, hi0 = cm.lower.copy(), cm.upper.copy()
    for v in bins:
        if lo0[v] < 0.0 or hi0[v] > 1.0:
            raise ModelError(f"binary {model.names[v]} must have bounds within [0, 1]")
    for v in np.flatnonzero(np.isin(np.arange(cm.n), bins, invert=True) & (cm.c != 0)):
        if not (np.isfinite(lo0[v]) and np.isfinite(hi0[v])):
            log.debug("objective variable %s has an infinite bound", model.names[v])

    best_x, best_obj = None, -np.inf
    lps = 0
    iters = 0

    def evaluate(lo, hi, parent=None, changed=()):
        nonlocal lps, iters
        if parent is None or not warm_start:
            sol = _solve(cm, lo, hi, max_iter, keep_state=warm_start)
        else:
            sol = _resolve(cm, parent, lo, hi, changed, max_iter)
        lps += 1
        iters += sol.iterations
        return sol

    def try_incumbent(sol):
        nonlocal best_x, best_obj
        if sol.status != Status.OPTIMAL:
            return
        if bins.size and np.max(_fractional(sol.x, bins), initial=0.0) > INT_TOL:
            return
        if sol.objective > best_obj:
            best_obj, best_x = sol.objective, sol.x.copy()

    def run_heuristic(sol, lo, hi):
        fix = heuristic(sol.x)
        if not fix:
            return
        lo2, hi2 = lo.copy(), hi.copy()
        for v, val in fix.items():
            lo2[v] = hi2[v] = val
        try_incumbent(evaluate(lo2, hi2, sol.state, list(fix)))

    root = evaluate(lo0, hi0)
    if root.status != Status.OPTIMAL:
        root.nodes = 1
        return root
    if bins.size == 0:
        root.state = None
        return root
    heap = []
    counter = 0
    heapq.heappush(heap, (-root.objective, counter, lo0, hi0, root))
    if heuristic is not None:
        run_heuristic(root, lo0, hi0)
    popped = 0
    limited = False
    while heap:
        neg_bound, _, lo, hi, sol = heapq.heappop(heap)
        if -neg_bound <= best_obj + gap:
            break
        popped += 1
        if lps >= node_limit:
            limited = True
            break
        frac = _fractional(sol.x, bins)
        if np.max(frac) <= INT_TOL:
            try_incumbent(sol)
            continue
        # most fractional, ties -> lowest id (argmax takes the first)
        v = int(bins[int(np.argmax(frac))])
        if heuristic is not None and popped % heuristic_every == 0:
            run_heuristic(sol, lo, hi)
        for val in (0.0, 1.0):
            lo2, hi2 = lo.copy(), hi.copy()
            lo2[v] = hi2[v] = val
            child = evaluate(lo2, hi2, sol.state, (v,))
            if child.status == Status.OPTIMAL and child.objective > best_obj + gap:
                frac_c = _fractional(child.x, bins)
                if np.max(frac_c) <= INT_TOL:
                    try_incumbent(child)
                else:
                    counter += 1
                    heapq.heappush(heap, (-child.objective, counter, lo2, hi2, child))
    if best_x is None:
        status = Status.ITER_LIMIT if limited else Status.INFEASIBLE
        return MilpSolution(status, nodes=lps, iterations=iters)
    x = best_x.copy()
    x[bins] = np.round(x[bins])
    status = Status.ITER_LIMIT if limited else Status.OPTIMAL
    if limited:
        log.warning("branch-and-bound node limit %d reached; returning incumbent", node_limit)
    return MilpSolution(status, x, best_obj, nodes=lps, iterations=iters)


# ---------------------------------------------------------------------------
# encodings


@dataclass
class LayerBounds:
    pre_lo: np.ndarray
    pre_hi: np.ndarray
    post_lo: np.ndarray
    post_hi: np.ndarray


def interval_bounds(params: MlpParams, lo, hi) -> list[LayerBounds]:
    """Layer-by-layer interval arithmetic over the input box ``[lo, hi]``."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    out = []
    for layer in params.layers:
        Wp = np.maximum(layer.weight, 0.0)
        Wn = np.minimum(layer.weight, 0.0)
        plo = Wp @ lo + Wn @ hi + layer.bias
        phi = Wp @ hi + Wn @ lo + layer.bias
        if layer.activation == "relu":
            qlo, qhi = np.maximum(plo, 0.0), np.maximum(phi, 0.0)
        else:
            qlo, qhi = plo, phi
        out.append(LayerBounds(plo, phi, qlo, qhi))
        lo, hi = qlo, qhi
    return out


def encode_relu(model: MilpModel, pre: LinExpr, lo: float, hi: float,
                name: str = "relu") -> tuple[LinExpr, int | None]:
    """Add ``out = max(0, pre)`` given ``lo <= pre <= hi``.

    Returns ``(out, binary_id)``; ``binary_id`` is None for stable neurons.
    """
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise ModelError("relu encoding needs finite bounds")
    if lo > hi:
        raise ModelError(f"relu bounds inverted: {lo} > {hi}")
    if hi <= 0.0:
        return LinExpr.const(0.0), None
    if lo >= 0.0:
        return LinExpr(pre.terms, pre.constant), None
    out = model.add_var(0.0, hi, name=f"{name}.out")
    delta = model.add_var(binary=True, name=f"{name}.on")
    o = LinExpr.var(out)
    model.add_constr(o - pre, ">=", 0.0)
    # out <= pre - lo * (1 - delta)
    model.add_constr(o - pre + LinExpr.var(delta, -lo), "<=", -lo)
    # out <= hi * delta
    model.add_constr(o + LinExpr.var(delta, -hi), "<=", 0.0)
    return o, delta


def encode_abs(model: MilpModel, expr: LinExpr, lo: float, hi: float,
               name: str = "abs") -> LinExpr:
    """Exact ``|expr|`` as ``relu(expr) + relu(-expr)``."""
    pos, _ = encode_relu(model, expr, lo, hi, name + ".pos")
    neg, _ = encode_relu(model, -expr, -hi, -lo, name + ".neg")
    return pos + neg


def abs_upper(model: MilpModel, expr: LinExpr, lo: float, hi: float,
              name: str = "absub") -> LinExpr:
    """Epigraph variable ``t >= |expr|`` without binaries.

    Exact wherever ``t`` only appears with nonnegative weight on the left of
    ``<=`` constraints or is penalised in a maximisation objective.
    """
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise ModelError("abs bound needs finite bounds")
    if lo >= 0.0:
        return LinExpr(expr.terms, expr.constant)
    if hi <= 0.0:
        return -expr
    t = model.add_var(0.0, max(-lo, hi), name=name)
    tv = LinExpr.var(t)
    model.add_constr(tv - expr, ">=", 0.0)
    model.add_constr(tv + expr, ">=", 0.0)
    return tv


def expr_bounds(expr: LinExpr, lower, upper) -> tuple[float, float]:
    lo = hi = expr.constant
    for v, c in expr.terms.items():
        if c >= 0:
            lo += c * lower[v]
            hi += c * upper[v]
        else:
            lo += c * upper[v]
            hi += c * lower[v]
    return lo, hi


@dataclass
class QEncoding:
    q_var: int
    q_lo: float
    q_hi: float
    neurons: list  # per hidden layer: list of (pre, binary id or None, out)
    bounds: list


def _tightened(model: MilpModel, folded: MlpParams, u_vars: list, bounds: list) -> list:
    """Layer-wise LP bound tightening on a scratch copy of ``model``."""
    scratch = MilpModel()
    scratch.lower, scratch.upper = list(model.lower), list(model.upper)
    scratch.binary, scratch.names = list(model.binary), list(model.names)
    scratch.constraints = list(model.constraints)
    h = [LinExpr.var(v) for v in u_vars]
    out = []
    prev_lo = prev_hi = None
    for k, layer in enumerate(folded.layers):
        b = bounds[k]
        if prev_lo is not None:
            Wp, Wn = np.maximum(layer.weight, 0.0), np.minimum(layer.weight, 0.0)
            plo = Wp @ prev_lo + Wn @ prev_hi + layer.bias
            phi = Wp @ prev_hi + Wn @ prev_lo + layer.bias
        else:
            plo, phi = b.pre_lo.copy(), b.pre_hi.copy()
        pres = [LinExpr.dot(layer.weight[r], h, layer.bias[r]) for r in range(layer.out_dim)]
        if layer.activation == "relu":
            lp_lo, lp_hi = lp_ranges(scratch, pres)
            pad = 1e-7 * (1.0 + np.abs(plo) + np.abs(phi))
            plo = np.maximum(plo, lp_lo - pad)
            phi = np.minimum(phi, lp_hi + pad)
            phi = np.maximum(phi, plo)
            qlo, qhi = np.maximum(plo, 0.0), np.maximum(phi, 0.0)
            h = [encode_relu(scratch, pres[r], plo[r], phi[r], f"t{k}.{r}")[0]
                 for r in range(layer.out_dim)]
        else:
            qlo, qhi = plo, phi
        out.append(LayerBounds(plo, phi, qlo, qhi))
        prev_lo, prev_hi = qlo, qhi
    return out


def encode_q_network(model: MilpModel, q_head: MlpParams, z, u_vars: list,
                     u_lo, u_hi, name: str = "q", tighten: bool = False) -> QEncoding:
    """Encode ``q_head(concat(U, z))`` with ``z`` folded into the first bias.

    With ``tighten`` the pre-activation bounds are shrunk by solving LPs over
    the constraints already in ``model`` (plus the relaxed encoding of earlier
    layers), which removes binaries and tightens the big-M constants.
    """
    z = np.asarray(z, dtype=float)
    nu = len(u_vars)
    first = q_head.layers[0]
    if first.in_dim != nu + z.size:
        raise ModelError(f"q-head expects {first.in_dim} inputs, got {nu}+{z.size}")
    folded = MlpParams(
        [Dense(first.weight[:, :nu], first.bias + first.weight[:, nu:] @ z, first.activation)]
        + list(q_head.layers[1:])
    )
    bounds = interval_bounds(folded, u_lo, u_hi)
    if tighten:
        bounds = _tightened(model, folded, u_vars, bounds)
    for k, b in enumerate(bounds):
        if np.max(np.abs(b.pre_lo), initial=0) > BOUND_LIMIT or \
                np.max(np.abs(b.pre_hi), initial=0) > BOUND_LIMIT:
            raise BoundExplosionError(
                f"layer {k} interval bounds exceed {BOUND_LIMIT:g}; "
                "regularise the acquisition weights"
            )
    h = [LinExpr.var(v) for v in u_vars]
    neurons = []
    for k, layer in enumerate(folded.layers):
        nxt = []
        rec = []
        for r in range(layer.out_dim):
            pre = LinExpr.dot(layer.weight[r], h, layer.bias[r])
            if layer.activation == "relu":
                out, delta = encode_relu(model, pre, bounds[k].pre_lo[r], bounds[k].pre_hi[r],
                                         f"{name}.l{k}.n{r}")
                rec.append((pre, delta, out))
                nxt.append(out)
            else:
                nxt.append(pre)
        if layer.activation == "relu":
            neurons.append(rec)
        h = nxt
    if len(h) != 1:
        raise ModelError("q-head must have a scalar output")
    qlo, qhi = float(bounds[-1].post_lo[0]), float(bounds[-1].post_hi[0])
    q = model.add_var(qlo, qhi, name=f"{name}.value")
    model.add_constr(LinExpr.var(q) - h[0], "==", 0.0)
    return QEncoding(q, qlo, qhi, neurons, bounds)


def activation_fixings(enc: QEncoding, x) -> dict:
    """Binary values for the activation pattern of the network at ``x``'s inputs.

    Hidden outputs are recomputed exactly layer by layer, so only the input
    (action) entries of ``x`` matter.
    """
    fix = {}
    vals = np.array(x, dtype=float)
    for layer in enc.neurons:
        for pre, delta, out in layer:
            if delta is None:
                continue
            p = pre.value(vals)
            fix[delta] = 1.0 if p > 0.0 else 0.0
            (out_id,) = out.terms
            vals[out_id] = max(p, 0.0)
    return fix
