import numpy as np
import pytest

from safemal.dynamics import (
    EnsembleConfig, Linearization, TransitionSample, bootstrap_resample, from_members,
    heldout_mse, linear_member, linearize, member_jacobians, predict_mean, residual_std,
    split_eval, train_ensemble,
)
from safemal.nn import Dense, DivergenceError, MlpParams, ShapeError, finite_diff_grad, init_mlp, mlp_forward


def linear_data(n, A, B, rng, noise=0.0):
    D, J = B.shape
    out = []
    for _ in range(n):
        x = rng.uniform(-1, 1, D)
        u = rng.uniform(-1, 1, J)
        out.append(TransitionSample.make(x, u, A @ x + B @ u + noise * rng.normal(size=D)))
    return out


def random_ensemble(seed, D=3, J=2, B=4, hidden=(6,)):
    rng = np.random.default_rng(seed)
    members = [init_mlp([D + J, *hidden, D], rng) for _ in range(B)]
    return from_members(members, D, J)


# bootstrap

def test_bootstrap_empty_raises():
    with pytest.raises(ValueError):
        bootstrap_resample([], 0)


def test_bootstrap_single_element():
    assert bootstrap_resample(["a"], 3) == ["a"]


def test_bootstrap_deterministic():
    data = list(range(50))
    assert bootstrap_resample(data, 7) == bootstrap_resample(data, 7)
    assert bootstrap_resample(data, 7) != bootstrap_resample(data, 8)


def test_bootstrap_distinct_fraction():
    data = list(range(1000))
    fracs = [len(set(bootstrap_resample(data, s))) / 1000 for s in range(20)]
    expected = 1 - (1 - 1 / 1000) ** 1000
    assert abs(expected - (1 - np.exp(-1))) < 1e-3
    for f in fracs:
        assert abs(f - expected) < 0.03


# transitions and split

def test_transition_rejects_nonfinite_and_mismatch():
    with pytest.raises(ValueError):
        TransitionSample.make([0.0, np.nan], [0.0], [0.0, 0.0])
    with pytest.raises(ShapeError):
        TransitionSample.make([0.0, 1.0], [0.0], [0.0])


def test_split_is_append_stable():
    data = list(range(23))
    tr, ev = split_eval(data, 0.2)
    tr2, ev2 = split_eval(data + list(range(23, 40)), 0.2)
    assert tr2[:len(tr)] == tr and ev2[:len(ev)] == ev
    assert len(ev) == 4 and not set(tr) & set(ev)


# training

def test_train_too_few_samples():
    rng = np.random.default_rng(0)
    data = linear_data(4, np.eye(1), np.eye(1), rng)
    with pytest.raises(ValueError):
        train_ensemble(data, EnsembleConfig(), 0)


def test_linear_fit_quality():
    rng = np.random.default_rng(0)
    data = linear_data(60, np.array([[0.8]]), np.array([[0.5]]), rng)
    ens = train_ensemble(data, EnsembleConfig(epochs=600), seed=1)
    assert len(ens.members) == 5 and len(ens.eval_set) == 12
    assert heldout_mse(ens, ens.eval_set) < 1e-3


def test_duplicate_only_dataset():
    s = TransitionSample.make([0.3, -0.2], [0.5], [1.0, -1.0])
    ens = train_ensemble([s] * 10, EnsembleConfig(epochs=800, eval_fraction=0.0), seed=0)
    for m in ens.members:
        out, _ = mlp_forward(m, np.concatenate([s.x, s.u]))
        np.testing.assert_allclose(out, s.x_next, atol=1e-3)


def test_training_deterministic():
    rng = np.random.default_rng(3)
    data = linear_data(20, np.eye(2) * 0.9, np.ones((2, 1)), rng)
    a = train_ensemble(data, EnsembleConfig(epochs=30), seed=5)
    b = train_ensemble(data, EnsembleConfig(epochs=30), seed=5)
    for ma, mb in zip(a.members, b.members):
        for x, y in zip(ma.arrays(), mb.arrays()):
            assert np.array_equal(x, y)


def test_training_divergence_raises():
    data = [TransitionSample(np.zeros(1), np.zeros(1), np.array([1e300])) for _ in range(6)]
    with pytest.raises(DivergenceError):
        train_ensemble(data, EnsembleConfig(epochs=5, lr=1.0), seed=0)


def test_warm_start_continues_from_previous():
    rng = np.random.default_rng(4)
    A, B = np.array([[0.8]]), np.array([[0.5]])
    data = linear_data(30, A, B, rng)
    cfg = EnsembleConfig(epochs=100)
    first = train_ensemble(data, cfg, seed=0)
    more = data + linear_data(10, A, B, rng)
    warm = train_ensemble(more, cfg, seed=1, previous=first)
    cold = train_ensemble(more, cfg, seed=1)
    assert heldout_mse(warm, warm.eval_set) < heldout_mse(cold, cold.eval_set)


def test_heldout_mse_median_decreases_with_data():
    A = np.array([[0.9, 0.1], [-0.1, 0.9]])
    B = np.array([[0.5], [0.2]])
    curves = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        probe = linear_data(100, A, B, np.random.default_rng(1000 + seed))
        data, prev, curve = [], None, []
        for _ in range(8):
            data += linear_data(5, A, B, rng, noise=0.01)
            if len(data) < 10:
                continue
            prev = train_ensemble(data, EnsembleConfig(epochs=80), seed=seed, previous=prev)
            curve.append(heldout_mse(prev, probe))
        curves.append(curve)
    med = np.median(np.array(curves), axis=0)
    smooth = np.convolve(med, np.ones(3) / 3, mode="valid")
    assert np.all(np.diff(smooth) <= 0)


# prediction

def test_predict_dim_mismatch():
    ens = random_ensemble(0)
    with pytest.raises(ShapeError):
        predict_mean(ens, np.zeros(2), np.zeros(2))


def test_identical_members_equal_single_output():
    rng = np.random.default_rng(1)
    m = init_mlp([5, 6, 3], rng)
    ens = from_members([m, m.copy(), m.copy()], 3, 2)
    x, u = rng.normal(size=3), rng.normal(size=2)
    np.testing.assert_allclose(predict_mean(ens, x, u), mlp_forward(m, np.r_[x, u])[0], atol=1e-15)


def test_opposite_members_cancel():
    v = np.array([1.5, -2.0])
    plus = MlpParams([Dense(np.zeros((2, 3)), v, "identity")])
    minus = MlpParams([Dense(np.zeros((2, 3)), -v, "identity")])
    ens = from_members([plus, minus], 2, 1)
    np.testing.assert_allclose(predict_mean(ens, np.ones(2), np.ones(1)), 0.0, atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_predict_mean_matches_loop_oracle(seed):
    ens = random_ensemble(seed)
    rng = np.random.default_rng(seed + 100)
    x, u = rng.normal(size=3), rng.normal(size=2)
    total = np.zeros(3)
    for m in ens.members:
        total += mlp_forward(m, np.r_[x, u])[0]
    np.testing.assert_allclose(predict_mean(ens, x, u), total / len(ens.members), atol=1e-12)


# linearization

@pytest.mark.parametrize("seed", range(5))
def test_linearize_exact_linear_ensemble(seed):
    rng = np.random.default_rng(seed)
    A, B = rng.normal(size=(3, 3)), rng.normal(size=(3, 2))
    ens = from_members([linear_member(A, B) for _ in range(3)], 3, 2)
    lin = linearize(ens, rng.normal(size=3) * 5, rng.normal(size=2) * 5)
    np.testing.assert_allclose(lin.A_bar, A, atol=1e-6)
    np.testing.assert_allclose(lin.B_bar, B, atol=1e-6)
    np.testing.assert_allclose(lin.c_bar, 0.0, atol=1e-6)
    np.testing.assert_allclose(lin.sigma_state, 0.0, atol=1e-6)
    np.testing.assert_allclose(lin.sigma_action, 0.0, atol=1e-6)


def test_linearize_two_point_std():
    a = np.array([[0.5, -1.2], [2.0, 0.3]])
    b = np.array([[0.1], [-0.4]])
    ens = from_members([linear_member(a, b), linear_member(-a, -b)], 2, 1)
    lin = linearize(ens, np.array([0.2, 0.1]), np.array([0.3]))
    np.testing.assert_allclose(lin.A_bar, 0.0, atol=1e-6)
    np.testing.assert_allclose(lin.sigma_state, np.abs(a), atol=1e-6)
    np.testing.assert_allclose(lin.sigma_action, np.abs(b), atol=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_linearize_matches_finite_diff_oracle(seed):
    ens = random_ensemble(seed)
    rng = np.random.default_rng(seed + 50)
    x0, u0 = rng.normal(size=3), rng.normal(size=2)
    lin = linearize(ens, x0, u0)
    full = np.hstack([lin.A_bar, lin.B_bar])
    for d in range(3):
        g = finite_diff_grad(lambda z: predict_mean(ens, z[:3], z[3:])[d], np.r_[x0, u0])
        np.testing.assert_allclose(full[d], g, atol=1e-4)
    np.testing.assert_allclose(
        lin.c_bar, predict_mean(ens, x0, u0) - lin.A_bar @ x0 - lin.B_bar @ u0, atol=1e-12
    )


def test_sigma_zero_for_identical_members_and_nonnegative():
    ens = random_ensemble(2)
    m = ens.members[0]
    same = from_members([m, m.copy()], 3, 2)
    lin = linearize(same, np.ones(3) * 0.1, np.ones(2) * 0.1)
    assert np.all(lin.sigma_state == 0) and np.all(lin.sigma_action == 0)
    lin2 = linearize(ens, np.ones(3) * 0.1, np.ones(2) * 0.1)
    assert np.all(lin2.sigma_state >= 0) and np.all(lin2.sigma_action >= 0)


def test_member_jacobian_nonfinite_raises():
    bad = MlpParams([Dense(np.full((1, 2), 1e308), np.zeros(1), "identity")])
    ens = from_members([bad, bad], 1, 1)
    with np.errstate(all="ignore"), pytest.raises(DivergenceError):
        member_jacobians(ens, np.full(1, 10.0), np.full(1, 10.0))


def test_linearization_rejects_negative_sigma():
    with pytest.raises(ValueError):
        Linearization(np.eye(1), np.eye(1), np.zeros(1), -np.ones((1, 1)), np.zeros((1, 1)))


# held-out error

def test_heldout_mse_cases():
    zero = MlpParams([Dense(np.zeros((2, 3)), np.zeros(2), "identity")])
    ens = from_members([zero, zero], 2, 1)
    unit = [TransitionSample.make([0.1, 0.2], [0.3], [1.0, -1.0]) for _ in range(4)]
    assert heldout_mse(ens, unit) == pytest.approx(1.0)
    perfect = from_members([linear_member(np.eye(2), np.zeros((2, 1)))] * 2, 2, 1)
    stay = [TransitionSample.make([0.1, 0.2], [0.3], [0.1, 0.2])]
    assert heldout_mse(perfect, stay) == 0.0
    with pytest.raises(ValueError):
        heldout_mse(ens, [])


def test_heldout_mse_random_oracle():
    ens = random_ensemble(9)
    rng = np.random.default_rng(9)
    data = [TransitionSample.make(rng.normal(size=3), rng.normal(size=2), rng.normal(size=3))
            for _ in range(7)]
    acc = 0.0
    for s in data:
        e = predict_mean(ens, s.x, s.u) - s.x_next
        acc += float(e @ e) / 3
    assert heldout_mse(ens, data) == pytest.approx(acc / 7, abs=1e-12)


def test_residual_std_uses_heldout():
    rng = np.random.default_rng(0)
    data = linear_data(30, np.array([[0.8]]), np.array([[0.5]]), rng, noise=0.05)
    ens = train_ensemble(data, EnsembleConfig(epochs=300), seed=0)
    s = residual_std(ens)
    assert s.shape == (1,) and 0.0 < s[0] < 0.3
