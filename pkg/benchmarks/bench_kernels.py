"""Compare the compiled and pure-Python kernel backends on realistic workloads.

    python3 benchmarks/bench_kernels.py [--repeat 3]

Workloads: random LPs through ``lp_solve`` (primal simplex), warm-started
branch and bound on an encoded Q network (dual simplex), one policy MILP
solve, and an ensemble fit (``mlp_fit_adam``). Each backend's results are
checked against the other before timings are reported.
"""
import argparse
import time
from contextlib import contextmanager

import numpy as np

from safemal import kernels
from safemal.acquisition import History, init_acquisition
from safemal.dynamics import EnsembleConfig, Linearization, TransitionSample, train_ensemble
from safemal.milp import LinExpr, MilpModel, bb_solve, encode_q_network, lp_solve
from safemal.nn import init_mlp
from safemal.policy import PolicyConfig, SafetySpec, solve_policy


@contextmanager
def backend(module):
    saved = {k: getattr(kernels, k) for k in ("bounded_simplex", "dual_simplex", "mlp_fit_adam")}
    for k in saved:
        setattr(kernels, k, getattr(module, k))
    try:
        yield
    finally:
        for k, v in saved.items():
            setattr(kernels, k, v)


def random_lp(rng, n=30, m=20):
    model = MilpModel()
    lo = rng.uniform(-3, 0, n)
    hi = lo + rng.uniform(0.5, 4, n)
    x0 = rng.uniform(lo, hi)
    ids = [model.add_var(lo[i], hi[i]) for i in range(n)]
    for _ in range(m):
        a = rng.normal(size=n)
        model.add_constr(LinExpr(dict(zip(ids, a))), "<=", a @ x0 + rng.uniform(0, 1))
    model.set_objective(LinExpr(dict(zip(ids, rng.normal(size=n)))))
    return model


def work_lp():
    rng = np.random.default_rng(0)
    return [lp_solve(random_lp(rng)).objective for _ in range(20)]


def work_bb():
    rng = np.random.default_rng(1)
    out = []
    for _ in range(5):
        net = init_mlp([4 + 2, 8, 8, 1], rng)
        m = MilpModel()
        u = [m.add_var(-1, 1) for _ in range(4)]
        enc = encode_q_network(m, net, rng.normal(size=2), u, -np.ones(4), np.ones(4))
        m.set_objective(LinExpr.var(enc.q_var))
        out.append(bb_solve(m, warm_start=True).objective)
    return out


def work_policy():
    rng = np.random.default_rng(2)
    D, J, T = 6, 4, 2
    lin = Linearization(0.75 * np.eye(D), 0.5 * rng.normal(size=(D, J)), np.zeros(D),
                        0.02 * np.abs(rng.normal(size=(D, D))), 0.02 * np.abs(rng.normal(size=(D, J))),
                        0.02 * np.ones(D))
    spec = SafetySpec(np.zeros(D), 1.0, 0.05, T, -np.ones(J), np.ones(J))
    acq = init_acquisition(D, J, T, rng)
    U, diag = solve_policy(acq, History(D, J), lin, rng.uniform(-0.3, 0.3, D), spec, PolicyConfig())
    return [diag.objective]


def work_fit():
    rng = np.random.default_rng(3)
    X = rng.uniform(-1, 1, (60, 10))
    data = [TransitionSample(x[:6], x[6:], 0.8 * x[:6]) for x in X]
    ens = train_ensemble(data, EnsembleConfig(n_members=5, epochs=150), seed=0)
    return [float(l) for l in ens.train_loss]


WORKLOADS = {"lp_solve x20": work_lp, "bb_solve warm x5": work_bb,
             "solve_policy x1": work_policy, "train_ensemble x1": work_fit}


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args(argv)
    mods = kernels.backends()
    if "cython" not in mods:
        print("compiled kernels not built; only the python backend is timed")
    print(f"{'workload':20s}" + "".join(f"{name:>12s}" for name in mods) + "     speedup")
    for label, fn in WORKLOADS.items():
        times, results = {}, {}
        for name, mod in mods.items():
            with backend(mod):
                best = np.inf
                for _ in range(args.repeat):
                    t0 = time.perf_counter()
                    results[name] = fn()
                    best = min(best, time.perf_counter() - t0)
            times[name] = best
        if len(results) == 2:
            np.testing.assert_allclose(results["cython"], results["python"], rtol=1e-6, atol=1e-8)
        speed = f"{times['python'] / times['cython']:10.1f}x" if "cython" in times else ""
        print(f"{label:20s}" + "".join(f"{times[n]:11.3f}s" for n in mods) + speed)


if __name__ == "__main__":
    main()
