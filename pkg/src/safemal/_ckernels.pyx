# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Semantics match ``_pykernels`` exactly."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, isfinite, INFINITY, NAN, pow

cnp.import_array()

DEF OPTIMAL = 0
DEF INFEASIBLE = 1
DEF UNBOUNDED = 2
DEF ITER_LIMIT = 3


def bounded_simplex(double[:, ::1] T, double[::1] d, double[::1] beta,
                    cnp.int64_t[::1] basis, cnp.int8_t[::1] at_upper,
                    double[::1] upper, Py_ssize_t n_allowed, Py_ssize_t max_iter,
                    double tol):
    cdef Py_ssize_t m = T.shape[0], n = T.shape[1]
    cdef Py_ssize_t i, k, j, row, it = 0
    cdef double s, a, ratio, best, start, piv, t, dj, f, ub
    cdef bint to_upper
    cdef cnp.int8_t[::1] is_basic = np.zeros(n, dtype=np.int8)
    cdef double[::1] ratios = np.empty(m)
    cdef cnp.int8_t[::1] up = np.empty(m, dtype=np.int8)
    cdef Py_ssize_t leaving
    for i in range(m):
        is_basic[basis[i]] = 1
    while True:
        j = -1
        for k in range(n_allowed):
            if is_basic[k]:
                continue
            if at_upper[k] == 0:
                if d[k] < -tol and upper[k] > tol:
                    j = k
                    break
            elif d[k] > tol:
                j = k
                break
        if j < 0:
            return OPTIMAL, it
        if it >= max_iter:
            return ITER_LIMIT, it
        s = -1.0 if at_upper[j] else 1.0
        best = INFINITY
        for i in range(m):
            a = s * T[i, j]
            ub = upper[basis[i]]
            up[i] = 0
            ratios[i] = INFINITY
            if a > tol:
                ratios[i] = (beta[i] if beta[i] > 0.0 else 0.0) / a
            elif a < -tol and isfinite(ub):
                f = ub - beta[i]
                ratios[i] = (f if f > 0.0 else 0.0) / (-a)
                up[i] = 1
            if ratios[i] < best:
                best = ratios[i]
        row = -1
        if isfinite(best):
            for i in range(m):
                if ratios[i] <= best + tol:
                    if row < 0 or basis[i] < basis[row]:
                        row = i
        to_upper = up[row] if row >= 0 else 0
        it += 1
        if isfinite(upper[j]) and upper[j] <= best:
            t = s * upper[j]
            for i in range(m):
                beta[i] -= t * T[i, j]
            at_upper[j] = 0 if at_upper[j] else 1
            continue
        if row < 0:
            return UNBOUNDED, it
        t = best
        start = upper[j] if at_upper[j] else 0.0
        for i in range(m):
            beta[i] -= s * t * T[i, j]
        leaving = basis[row]
        piv = T[row, j]
        for k in range(n):
            T[row, k] /= piv
        for i in range(m):
            if i == row:
                continue
            f = T[i, j]
            if f != 0.0:
                for k in range(n):
                    T[i, k] -= f * T[row, k]
        dj = d[j]
        if dj != 0.0:
            for k in range(n):
                d[k] -= dj * T[row, k]
        beta[row] = start + s * t
        at_upper[j] = 0
        at_upper[leaving] = 1 if to_upper else 0
        is_basic[leaving] = 0
        is_basic[j] = 1
        basis[row] = j



def dual_simplex(double[:, ::1] T, double[::1] d, double[::1] beta,
                 cnp.int64_t[::1] basis, cnp.int8_t[::1] at_upper,
                 double[::1] lower, double[::1] upper, Py_ssize_t max_iter, double tol):
    cdef Py_ssize_t m = T.shape[0], n = T.shape[1]
    cdef Py_ssize_t i, k, row, q, p, it = 0
    cdef double v, vb, va, best, bestabs, a, r, piv, delta, start, target, f, dq
    cdef bint go_low, ok
    cdef cnp.int8_t[::1] is_basic = np.zeros(n, dtype=np.int8)
    for i in range(m):
        is_basic[basis[i]] = 1
    while True:
        row = -1
        best = tol
        go_low = 0
        for i in range(m):
            vb = lower[basis[i]] - beta[i]
            va = beta[i] - upper[basis[i]]
            v = vb if vb >= va else va
            if v > best:
                best = v
                row = i
                go_low = vb >= va
        if row < 0:
            return OPTIMAL, it
        if it >= max_iter:
            return ITER_LIMIT, it
        best = INFINITY
        for k in range(n):
            if is_basic[k] or not (upper[k] - lower[k] > tol):
                continue
            a = T[row, k]
            if go_low:
                ok = (at_upper[k] == 0 and a < -tol) or (at_upper[k] != 0 and a > tol)
            else:
                ok = (at_upper[k] == 0 and a > tol) or (at_upper[k] != 0 and a < -tol)
            if ok:
                r = (d[k] if d[k] >= 0 else -d[k]) / (a if a >= 0 else -a)
                if r < best:
                    best = r
        if not isfinite(best):
            return INFEASIBLE, it
        q = -1
        bestabs = -1.0
        for k in range(n):
            if is_basic[k] or not (upper[k] - lower[k] > tol):
                continue
            a = T[row, k]
            if go_low:
                ok = (at_upper[k] == 0 and a < -tol) or (at_upper[k] != 0 and a > tol)
            else:
                ok = (at_upper[k] == 0 and a > tol) or (at_upper[k] != 0 and a < -tol)
            if ok:
                r = (d[k] if d[k] >= 0 else -d[k]) / (a if a >= 0 else -a)
                if r <= best + 1e-12:
                    a = a if a >= 0 else -a
                    if a > bestabs:
                        bestabs = a
                        q = k
        it += 1
        p = basis[row]
        target = lower[p] if go_low else upper[p]
        piv = T[row, q]
        delta = (beta[row] - target) / piv
        start = upper[q] if at_upper[q] else lower[q]
        for i in range(m):
            beta[i] -= delta * T[i, q]
        for k in range(n):
            T[row, k] /= piv
        for i in range(m):
            if i == row:
                continue
            f = T[i, q]
            if f != 0.0:
                for k in range(n):
                    T[i, k] -= f * T[row, k]
        dq = d[q]
        if dq != 0.0:
            for k in range(n):
                d[k] -= dq * T[row, k]
        beta[row] = start + delta
        at_upper[q] = 0
        at_upper[p] = 0 if go_low else 1
        is_basic[p] = 0
        is_basic[q] = 1
        basis[row] = q

cdef void _adam(double[::1] p, double[::1] g, double[::1] m, double[::1] v,
                double lr, double b1, double b2, double c1, double c2, double eps) nogil:
    cdef Py_ssize_t i
    for i in range(p.shape[0]):
        m[i] = b1 * m[i] + (1.0 - b1) * g[i]
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i]
        p[i] -= lr * (m[i] / c1) / (sqrt(v[i] / c2) + eps)


def mlp_fit_adam(list weights, list biases, list relu, double[:, ::1] X,
                 double[:, ::1] Y, list m_w, list v_w, list m_b, list v_b,
                 long step, long epochs, double lr, double beta1, double beta2,
                 double eps):
    cdef Py_ssize_t n = Y.shape[0], dout = Y.shape[1]
    cdef Py_ssize_t L = len(weights)
    cdef Py_ssize_t e, k, r, i, c, din, dk
    cdef double loss = NAN, acc, f, scale = 2.0 / (n * dout), c1, c2
    cdef double[:, ::1] W, h, a, gin, gout, gw
    cdef double[::1] b, gb
    acts = [np.asarray(X)] + [np.empty((n, (<object>weights[k]).shape[0])) for k in range(L)]
    pres = [np.empty((n, (<object>weights[k]).shape[0])) for k in range(L)]
    grads = [np.empty((n, (<object>weights[k]).shape[0])) for k in range(L)]
    gws = [np.empty_like(weights[k]) for k in range(L)]
    gbs = [np.empty_like(biases[k]) for k in range(L)]
    cdef bint is_relu
    for e in range(epochs):
        for k in range(L):
            W = weights[k]
            b = biases[k]
            h = acts[k]
            a = pres[k]
            is_relu = relu[k]
            dk = W.shape[0]
            din = W.shape[1]
            out = acts[k + 1]
            gin = out
            for r in range(n):
                for i in range(dk):
                    acc = b[i]
                    for c in range(din):
                        acc += W[i, c] * h[r, c]
                    a[r, i] = acc
                    gin[r, i] = (acc if acc > 0.0 else 0.0) if is_relu else acc
        h = acts[L]
        gout = grads[L - 1]
        acc = 0.0
        for r in range(n):
            for i in range(dout):
                f = h[r, i] - Y[r, i]
                acc += f * f
                gout[r, i] = scale * f
        loss = acc / (n * dout)
        if not isfinite(loss):
            return NAN, step
        step += 1
        c1 = 1.0 - pow(beta1, step)
        c2 = 1.0 - pow(beta2, step)
        for k in range(L - 1, -1, -1):
            W = weights[k]
            a = pres[k]
            h = acts[k]
            gout = grads[k]
            gw = gws[k]
            gb = gbs[k]
            dk = W.shape[0]
            din = W.shape[1]
            if relu[k]:
                for r in range(n):
                    for i in range(dk):
                        if a[r, i] <= 0.0:
                            gout[r, i] = 0.0
            for i in range(dk):
                acc = 0.0
                for r in range(n):
                    acc += gout[r, i]
                gb[i] = acc
                for c in range(din):
                    acc = 0.0
                    for r in range(n):
                        acc += gout[r, i] * h[r, c]
                    gw[i, c] = acc
            if k > 0:
                gin = grads[k - 1]
                for r in range(n):
                    for c in range(din):
                        acc = 0.0
                        for i in range(dk):
                            acc += gout[r, i] * W[i, c]
                        gin[r, c] = acc
            _adam(np.asarray(W).reshape(-1), np.asarray(gw).reshape(-1),
                  np.asarray(m_w[k]).reshape(-1), np.asarray(v_w[k]).reshape(-1),
                  lr, beta1, beta2, c1, c2, eps)
            _adam(biases[k], gb, m_b[k], v_b[k], lr, beta1, beta2, c1, c2, eps)
    return loss, step
