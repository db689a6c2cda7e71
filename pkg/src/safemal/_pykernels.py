"""Pure-Python (numpy) reference implementation of the hot kernels.

Mirrors ``_ckernels.pyx`` call for call; ``safemal.kernels`` picks one at import.
"""
import numpy as np

OPTIMAL, INFEASIBLE, UNBOUNDED, ITER_LIMIT = 0, 1, 2, 3


def bounded_simplex(T, d, beta, basis, at_upper, upper, n_allowed, max_iter, tol):
    """Primal simplex with Bland's rule on a bounded-variable tableau.

    Minimises; every argument except the scalars is mutated in place.

    T : (m, n) tableau ``B^-1 A``
    d : (n,) reduced costs
    beta : (m,) values of the basic variables
    basis : (m,) int64 column index basic in each row
    at_upper : (n,) int8 flag for nonbasic variables resting at their upper bound
    upper : (n,) finite upper bounds or ``inf``
    n_allowed : only columns ``< n_allowed`` may enter

    Returns ``(status, iterations)``.
    """
    m, n = T.shape
    is_basic = np.zeros(n, dtype=bool)
    is_basic[basis] = True
    it = 0
    while True:
        cand = np.flatnonzero(
            ~is_basic[:n_allowed]
            & (((at_upper[:n_allowed] == 0) & (d[:n_allowed] < -tol) & (upper[:n_allowed] > tol))
               | ((at_upper[:n_allowed] != 0) & (d[:n_allowed] > tol)))
        )
        if cand.size == 0:
            return OPTIMAL, it
        if it >= max_iter:
            return ITER_LIMIT, it
        j = int(cand[0])
        s = -1.0 if at_upper[j] else 1.0
        alpha = T[:, j]
        sa = s * alpha
        ub = upper[basis]
        ratios = np.full(m, np.inf)
        up = np.zeros(m, dtype=bool)
        pos = sa > tol
        ratios[pos] = np.maximum(beta[pos], 0.0) / sa[pos]
        neg = (sa < -tol) & np.isfinite(ub)
        ratios[neg] = np.maximum(ub[neg] - beta[neg], 0.0) / (-sa[neg])
        up[neg] = True
        row = -1
        best = np.inf
        if m:
            best = ratios.min()
        if np.isfinite(best):
            # Bland: among (near-)ties leave the lowest-index basic variable
            ties = np.flatnonzero(ratios <= best + tol)
            row = int(ties[np.argmin(basis[ties])])
        to_upper = bool(up[row]) if row >= 0 else False
        it += 1
        if np.isfinite(upper[j]) and upper[j] <= best:
            # bound flip, no basis change
            beta -= s * upper[j] * alpha
            at_upper[j] = 0 if at_upper[j] else 1
            continue
        if row < 0:
            return UNBOUNDED, it
        t = best
        start = upper[j] if at_upper[j] else 0.0
        beta -= s * t * alpha
        leaving = basis[row]
        piv = alpha[row]
        T[row] /= piv
        col = T[:, j].copy()
        col[row] = 0.0
        T -= np.outer(col, T[row])
        d -= d[j] * T[row]
        beta[row] = start + s * t
        at_upper[j] = 0
        at_upper[leaving] = 1 if to_upper else 0
        is_basic[leaving] = False
        is_basic[j] = True
        basis[row] = j



def dual_simplex(T, d, beta, basis, at_upper, lower, upper, max_iter, tol):
    """Dual simplex on a dual-feasible bounded tableau with general bounds.

    Nonbasic columns rest at ``lower`` or, when flagged, at ``upper``. Used to
    re-optimise after bound changes. Leaving row: largest bound violation
    (ties to the lowest row). Entering column: smallest ``|d_j| / |alpha_j|``,
    ties to the largest ``|alpha_j|`` and then the lowest index.

    Returns ``(status, iterations)`` with status OPTIMAL, INFEASIBLE or ITER_LIMIT.
    """
    m, n = T.shape
    is_basic = np.zeros(n, dtype=bool)
    is_basic[basis] = True
    movable = (upper - lower) > tol
    it = 0
    while True:
        lb = lower[basis]
        ub = upper[basis]
        below = lb - beta
        above = beta - ub
        viol = np.maximum(below, above)
        if m == 0 or viol.max() <= tol:
            return OPTIMAL, it
        if it >= max_iter:
            return ITER_LIMIT, it
        row = int(np.argmax(viol))
        go_low = below[row] >= above[row]
        alpha = T[row]
        atu = at_upper != 0
        if go_low:
            elig = (~atu & (alpha < -tol)) | (atu & (alpha > tol))
        else:
            elig = (~atu & (alpha > tol)) | (atu & (alpha < -tol))
        elig &= ~is_basic & movable
        cand = np.flatnonzero(elig)
        if cand.size == 0:
            return INFEASIBLE, it
        a = np.abs(alpha[cand])
        ratios = np.abs(d[cand]) / a
        best = ratios.min()
        near = ratios <= best + 1e-12
        q = int(cand[near][np.argmax(a[near])])
        it += 1
        p = basis[row]
        target = lower[p] if go_low else upper[p]
        piv = alpha[q]
        delta = (beta[row] - target) / piv
        start = upper[q] if at_upper[q] else lower[q]
        beta -= delta * T[:, q]
        T[row] /= piv
        col = T[:, q].copy()
        col[row] = 0.0
        T -= np.outer(col, T[row])
        d -= d[q] * T[row]
        beta[row] = start + delta
        at_upper[q] = 0
        at_upper[p] = 0 if go_low else 1
        is_basic[p] = False
        is_basic[q] = True
        basis[row] = q

def mlp_fit_adam(weights, biases, relu, X, Y, m_w, v_w, m_b, v_b, step,
                 epochs, lr, beta1, beta2, eps):
    """Full-batch Adam on mean squared error for a small MLP.

    ``weights``/``biases`` and the moment lists are updated in place.
    Returns ``(last_loss, step)``; ``last_loss`` is the loss before the final update.
    A non-finite loss returns ``nan`` immediately.
    """
    n, dout = Y.shape
    L = len(weights)
    scale = 2.0 / (n * dout)
    loss = np.nan
    for _ in range(epochs):
        acts = [X]
        pres = []
        h = X
        for k in range(L):
            a = h @ weights[k].T + biases[k]
            pres.append(a)
            h = np.maximum(a, 0.0) if relu[k] else a
            acts.append(h)
        r = h - Y
        loss = float(np.sum(r * r)) / (n * dout)
        if not np.isfinite(loss):
            return np.nan, step
        g = scale * r
        step += 1
        c1 = 1.0 - beta1 ** step
        c2 = 1.0 - beta2 ** step
        for k in range(L - 1, -1, -1):
            if relu[k]:
                g = g * (pres[k] > 0.0)
            gw = g.T @ acts[k]
            gb = g.sum(axis=0)
            if k > 0:
                g = g @ weights[k]
            for p, gr, m, v in ((weights[k], gw, m_w[k], v_w[k]),
                                (biases[k], gb, m_b[k], v_b[k])):
                m *= beta1
                m += (1.0 - beta1) * gr
                v *= beta2
                v += (1.0 - beta2) * gr * gr
                p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return loss, step
