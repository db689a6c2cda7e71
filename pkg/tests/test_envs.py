import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from safemal.envs import (AircraftConfig, AircraftParams, GpHyper, admets_step, admets_subject,
                          aircraft_probe, aircraft_step, fit_gp, gp_posterior, nominal_aircraft,
                          optimum_error, sample_damage, spectral_radius)


def _params(A, B, c, noise):
    D, J = B.shape
    return AircraftParams(np.asarray(A, float), np.asarray(B, float), np.asarray(c, float),
                          np.full(D, noise), -np.ones(J), np.ones(J))


# aircraft ------------------------------------------------------------------

def test_zero_damage_returns_nominal():
    p = sample_damage(3, AircraftConfig(damage_scale=0.0))
    A0, B0 = nominal_aircraft()
    np.testing.assert_array_equal(p.A_true, A0)
    np.testing.assert_array_equal(p.B_true, B0)
    assert p.damaged_columns == ()


def test_nominal_is_stable():
    assert spectral_radius(nominal_aircraft()[0]) < 1.0


def test_same_seed_same_params():
    a, b = sample_damage(11), sample_damage(11)
    np.testing.assert_array_equal(a.A_true, b.A_true)
    np.testing.assert_array_equal(a.B_true, b.B_true)


def test_spectral_radius_over_100_draws():
    for s in range(100):
        p = sample_damage(s)
        assert np.max(np.abs(np.linalg.eigvals(p.A_true))) <= 1.05 + 1e-9
        assert 1 <= len(p.damaged_columns) <= 2


def test_damage_scales_columns_within_range():
    _, B0 = nominal_aircraft()
    for s in range(30):
        p = sample_damage(s)
        for c in range(4):
            ratio = np.linalg.norm(p.B_true[:, c]) / np.linalg.norm(B0[:, c])
            if c in p.damaged_columns:
                assert -1e-12 <= ratio <= 0.7 + 1e-12
            else:
                assert ratio == pytest.approx(1.0)


def test_a_perturbation_is_bounded():
    A0, _ = nominal_aircraft()
    for s in range(30):
        A = sample_damage(s).A_true
        nz = A0 != 0
        rel = A[nz] / A0[nz]
        assert np.all(rel <= 1.2 + 1e-12) and np.all(rel > 0)
        assert np.all(A[~nz] == 0)


def test_other_dimensions_supported():
    p = sample_damage(0, AircraftConfig(state_dim=12, action_dim=5))
    assert p.A_true.shape == (12, 12) and p.B_true.shape == (12, 5)
    assert spectral_radius(p.A_true) <= 1.05 + 1e-9
    with pytest.raises(ValueError):
        nominal_aircraft(13, 4)


def test_step_zero_dynamics_gives_offset():
    p = _params(np.zeros((3, 3)), np.zeros((3, 2)), [0.1, -0.2, 0.3], 0.0)
    np.testing.assert_allclose(aircraft_step(p, np.ones(3), np.zeros(2), 0), [0.1, -0.2, 0.3])


def test_step_identity_dynamics():
    p = _params(np.eye(3), np.zeros((3, 2)), [1.0, 2.0, 3.0], 0.0)
    np.testing.assert_allclose(aircraft_step(p, [0.5, 0.5, 0.5], [0.3, -0.3], 0), [1.5, 2.5, 3.5])


def test_step_rejects_out_of_box_action():
    p = sample_damage(0)
    with pytest.raises(ValueError):
        aircraft_step(p, np.zeros(6), np.array([0, 0, 1.5, 0]), 0)
    with pytest.raises(ValueError):
        aircraft_step(p, np.zeros(6), np.zeros(3), 0)


def test_step_deterministic_per_noise_seed():
    p = sample_damage(0)
    a = aircraft_step(p, np.zeros(6), np.zeros(4), 7)
    assert np.array_equal(a, aircraft_step(p, np.zeros(6), np.zeros(4), 7))
    assert not np.array_equal(a, aircraft_step(p, np.zeros(6), np.zeros(4), 8))


def test_empirical_noise_std():
    p = _params(np.zeros((2, 2)), np.zeros((2, 1)), [0.0, 0.0], 0.02)
    draws = np.array([aircraft_step(p, np.zeros(2), np.zeros(1), s) for s in range(10000)])
    np.testing.assert_allclose(draws.std(axis=0), 0.02, rtol=0.05)


def test_unforced_trajectories_stay_bounded():
    cfg = AircraftConfig(noise_std=0.0)
    for s in range(20):
        p = sample_damage(s, cfg)
        x = np.ones(6)
        for t in range(100):
            x = aircraft_step(p, x, np.zeros(4), t)
        # rho <= 1.05 allows slow growth; bound it by the worst-case power
        assert np.linalg.norm(x) < 1e3


def test_probe_is_noise_free_truth():
    p = sample_damage(2)
    X, U, Y = aircraft_probe(p, 50, seed=1)
    np.testing.assert_allclose(Y, X @ p.A_true.T + U @ p.B_true.T)
    assert np.all(np.abs(U) <= 1)


def test_negative_noise_rejected():
    with pytest.raises(ValueError):
        AircraftParams(np.eye(1), np.eye(1), np.zeros(1), np.array([-0.1]), -np.ones(1), np.ones(1))


# GP ------------------------------------------------------------------------

def _dense_posterior(X, y, q, h):
    def k(a, b):
        return h.signal_var * np.exp(-0.5 * (np.subtract.outer(a, b) / h.lengthscale) ** 2)
    K = k(X, X) + (h.noise_var + 1e-8) * np.eye(len(X))
    Ks = k(q, X)
    mean = Ks @ np.linalg.solve(K, y)
    var = h.signal_var - np.einsum("ij,ji->i", Ks, np.linalg.solve(K, Ks.T))
    return mean, np.sqrt(var)


def test_single_point_interpolation():
    gp = fit_gp([0.3], [1.7], GpHyper(0.1, 1.0, 1e-12))
    mean, _ = gp_posterior(gp, [0.3])
    assert mean[0] == pytest.approx(1.7, abs=1e-6)


def test_prior_reversion_far_from_data():
    h = GpHyper(0.1, 2.0, 1e-4)
    gp = fit_gp([0.0, 0.1], [1.0, -1.0], h)
    mean, std = gp_posterior(gp, [50.0])
    assert abs(mean[0]) < 1e-10
    assert std[0] ** 2 == pytest.approx(2.0)


def test_three_point_dense_oracle():
    h = GpHyper(0.3, 1.5, 1e-3)
    X = np.array([0.1, 0.4, 0.8])
    y = np.array([0.5, -0.2, 1.1])
    q = np.linspace(0, 1, 11)
    mean, std = gp_posterior(fit_gp(X, y, h), q)
    m_ref, s_ref = _dense_posterior(X, y, q, h)
    np.testing.assert_allclose(mean, m_ref, atol=1e-8)
    np.testing.assert_allclose(std, s_ref, atol=1e-8)


def test_duplicate_inputs_are_handled_by_noise():
    gp = fit_gp([0.5, 0.5], [1.0, 1.2], GpHyper(0.1, 1.0, 1e-2))
    m, _ = gp_posterior(gp, [0.5])
    assert 1.0 < m[0] < 1.2


def test_fit_errors():
    with pytest.raises(ValueError):
        fit_gp([], [])
    with pytest.raises(ValueError):
        fit_gp([0.0, 1.0], [1.0])
    with pytest.raises(ValueError):
        GpHyper(lengthscale=0.0)
    with pytest.raises(ValueError):
        # identical inputs and a noise floor too small to fix the rank
        fit_gp([0.5] * 40, np.ones(40), GpHyper(0.1, 1e12, 1e-300))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=8, unique=True), st.integers(0, 10 ** 6))
def test_posterior_std_noise_floor(xs, seed):
    h = GpHyper(0.1, 1.0, 1e-3)
    y = np.random.default_rng(seed).normal(size=len(xs))
    _, std = gp_posterior(fit_gp(xs, y, h), xs)
    assert np.all(std >= 0)
    assert np.all(std <= np.sqrt(h.noise_var) + 1e-6)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=1, max_size=6, unique=True), st.integers(0, 10 ** 6))
def test_mirrored_data_mirrored_posterior(xs, seed):
    h = GpHyper(0.2, 1.0, 1e-3)
    xs = np.array(xs)
    y = np.random.default_rng(seed).normal(size=len(xs))
    q = np.linspace(-1.5, 1.5, 13)
    m1, s1 = gp_posterior(fit_gp(xs, y, h), q)
    m2, s2 = gp_posterior(fit_gp(-xs, y, h), -q)
    np.testing.assert_allclose(m1, m2, atol=1e-7)
    np.testing.assert_allclose(s1, s2, atol=1e-7)


def test_interpolant_as_noise_vanishes():
    X = np.array([0.0, 0.3, 0.6, 1.0])
    y = np.array([0.2, 1.0, -0.5, 0.4])
    m, _ = gp_posterior(fit_gp(X, y, GpHyper(0.2, 1.0, 1e-12)), X)
    np.testing.assert_allclose(m, y, atol=1e-5)


# ADMETS --------------------------------------------------------------------

def test_subject_deterministic():
    a, b = admets_subject(4), admets_subject(4)
    assert a.a_star == b.a_star
    np.testing.assert_array_equal(a.truth, b.truth)


def test_a_star_is_grid_argmax():
    for s in range(10):
        sub = admets_subject(s)
        m = sub.mean(sub.grid)
        assert sub.mean(sub.a_star)[0] >= m.max() - 1e-12


def test_every_subject_has_unsafe_region():
    for s in range(100):
        sub = admets_subject(s)
        assert sub.mean(sub.grid).min() < 0
        assert sub.mean(sub.grid[sub.grid <= 0.25]).min() > 0


def test_step_zero_noise_exact_mean():
    sub = admets_subject(0, noise_std=0.0)
    score, _ = admets_step(sub, 0.42, seed=3)
    assert score == pytest.approx(float(sub.mean(0.42)[0]))


def test_step_flags_side_effect_in_dip():
    sub = admets_subject(1)
    a = float(sub.grid[np.argmin(sub.truth)])
    _, flag = admets_step(sub, a, 0)
    assert flag
    _, flag = admets_step(sub, sub.a_star, 0)
    assert not flag


def test_step_rejects_out_of_range():
    sub = admets_subject(0)
    with pytest.raises(ValueError):
        admets_step(sub, 1.01, 0)
    with pytest.raises(ValueError):
        admets_step(sub, -0.5, 0)


def test_step_noise_statistics():
    sub = admets_subject(2, noise_std=0.05)
    mean = float(sub.mean(0.1)[0])
    draws = np.array([admets_step(sub, 0.1, s)[0] for s in range(10000)])
    assert abs(draws.mean() - mean) < 4 * 0.05 / 100
    assert draws.std() == pytest.approx(0.05, rel=0.05)


def test_optimum_error_cases():
    sub = admets_subject(0)
    assert optimum_error(sub, sub.a_star) == 0.0
    sub.a_star = 0.0
    assert optimum_error(sub, 1.0) == pytest.approx(1.0)
    assert optimum_error(sub, 0.5) == pytest.approx(0.5)
