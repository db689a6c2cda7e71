import numpy as np
import pytest

from safemal.harness.config import ExperimentConfig
from safemal.harness.episodes import EpisodeError, EpisodeRecord, StepRow, make_task, run_episode
from safemal.harness.metrics import (SchemaError, compute_metrics, episode_csv, episode_metrics,
                                     gain_curve, parse_episode_csv, read_episode, summary_csv,
                                     timing_csv, write_episode)
from safemal.harness.runner import run_experiment, untrained_acquisition


def _record(errors, safe=None, side=None, post=None):
    rows = []
    for t in range(len(errors) - 1):
        rows.append(StepRow(t, (0.1 * t, -0.5), 0.0, errors[t], errors[t + 1],
                            True if post is None else post[t],
                            True if safe is None else safe[t],
                            False if side is None else side[t], 3 * t, "optimal", 1.5 + t))
    return EpisodeRecord("aircraft", "ours", 0, errors[0], rows)


# metrics -------------------------------------------------------------------

def test_constant_error_has_no_gain():
    m = episode_metrics(_record([0.4] * 6))
    assert m.cumulative_gain == 0 and m.auc == 0 and m.mean_step_gain == 0


def test_halving_error_two_steps():
    m = episode_metrics(_record([1.0, 0.5, 0.25]))
    assert m.cumulative_gain == pytest.approx(0.75)
    assert m.mean_step_gain == pytest.approx(0.5)


def test_safety_rate_three_of_four():
    m = episode_metrics(_record([1.0] * 5, safe=[True, False, True, True]))
    assert m.safety_rate == pytest.approx(0.75)


def test_safety_rate_counts_post_return_rows_only():
    m = episode_metrics(_record([1.0] * 5, safe=[False, True, False, True],
                                post=[False, True, False, True]))
    assert m.safety_rate == 1.0


@pytest.mark.parametrize("seed", range(5))
def test_auc_matches_trapezoid(seed):
    e = np.random.default_rng(seed).uniform(0.1, 1.0, 9)
    m = episode_metrics(_record(list(e)))
    assert m.auc == pytest.approx(np.trapezoid(1 - e / e[0]))


def test_zero_initial_error_gain_curve():
    assert np.all(gain_curve([0.0, 0.0]) == 0)


def test_compute_metrics_errors_and_aggregate():
    with pytest.raises(ValueError):
        compute_metrics([])
    recs = [_record([1.0, 0.5]), _record([1.0, 0.25])]
    s = compute_metrics(recs)["ours"]
    assert s["episodes"] == 2
    assert s["cumulative_gain"]["mean"] == pytest.approx(0.625)
    assert s["cumulative_gain"]["median"] == pytest.approx(0.625)
    txt = summary_csv(compute_metrics(recs))
    assert "mean_solve_ms" not in txt
    assert "mean_solve_ms" in summary_csv(compute_metrics(recs), timing=True)


def test_csv_roundtrip(tmp_path):
    rec = _record([1.0, 0.7, 1.0 / 3.0], side=[False, True])
    assert parse_episode_csv(episode_csv(rec), timing_csv(rec)) == rec
    write_episode(rec, tmp_path / "e.csv", tmp_path / "t.csv")
    assert read_episode(tmp_path / "e.csv", tmp_path / "t.csv") == rec
    # timing never enters the metric file
    assert "1.5" not in (tmp_path / "e.csv").read_text().split("\n", 2)[2]


@pytest.mark.parametrize("mutate", [
    lambda t: t.replace("# safemal-episode v1", "# safemal-episode v9"),
    lambda t: t.replace("step,action", "stop,action"),
    lambda t: t.replace(",optimal", ",optimal,extra", 1),
    lambda t: t.replace("\n0,", "\nzero,", 1),
    lambda t: "\n".join(t.split("\n")[1:]),
])
def test_csv_schema_validation(mutate):
    with pytest.raises(SchemaError):
        parse_episode_csv(mutate(episode_csv(_record([1.0, 0.5, 0.2]))))


# episodes ------------------------------------------------------------------

SMALL = dict(steps=1, members=3, ensemble_epochs=40, probe_points=50, candidates=32,
             init_blocks=3)


def test_single_step_episode_one_row():
    cfg = ExperimentConfig(**SMALL)
    acq = untrained_acquisition(cfg)
    rec = run_episode(acq, cfg, seed=0, policy="ours")
    assert len(rec.rows) == 1
    assert rec.rows[0].e_t >= 0 and rec.rows[0].post_return
    assert len(rec.rows[0].action) == cfg.action_dim * cfg.horizon


@pytest.mark.parametrize("policy", ["ours", "random", "epistemic", "diversity"])
def test_aircraft_episode_deterministic(policy):
    cfg = ExperimentConfig(**{**SMALL, "steps": 3})
    acq = untrained_acquisition(cfg)
    a = run_episode(acq, cfg, 4, policy)
    b = run_episode(acq, cfg, 4, policy)
    assert episode_csv(a) == episode_csv(b)
    assert len(a.rows) == 3
    lo, hi = -1.0, 1.0
    for r in a.rows:
        assert all(lo - 1e-9 <= v <= hi + 1e-9 for v in r.action)


@pytest.mark.parametrize("policy", ["ours", "bo", "random", "epistemic", "diversity"])
def test_admets_episode(policy):
    cfg = ExperimentConfig(domain="admets", steps=4, policies=(policy,))
    acq = untrained_acquisition(cfg)
    a = run_episode(acq, cfg, 2)
    assert episode_csv(a) == episode_csv(run_episode(acq, cfg, 2))
    assert len(a.rows) == 4
    for r in a.rows:
        assert 0.0 <= r.action[0] <= 1.0 and r.e_t >= 0
        assert r.in_sphere == (not r.side_effect)


def test_passive_aircraft_stays_safe():
    cfg = ExperimentConfig(**{**SMALL, "steps": 5})
    acq = untrained_acquisition(cfg)
    for seed in range(3):
        rec = run_episode(acq, cfg, seed, "ours", lambda1=0.0)
        assert all(r.in_sphere for r in rec.rows)


def test_mpc_commit_executes_one_action_per_row():
    cfg = ExperimentConfig(**{**SMALL, "steps": 4, "commit_horizon": 1})
    task = make_task(cfg, 2, 2, "random")
    h, _ = task.begin()
    flags = []
    for _ in range(4):
        U, _ = task.decide(None, h)
        new, _, info = task.execute(U)
        assert len(new) == 1
        flags.append(info["post_return"])
        h = h.extended(new)
    assert flags == [False, True, False, True]


def test_episode_errors_carry_step_index(monkeypatch):
    cfg = ExperimentConfig(**{**SMALL, "steps": 3})
    import safemal.harness.episodes as ep
    calls = {"n": 0}
    real = ep.AircraftTask.execute

    def flaky(self, U):
        calls["n"] += 1
        if calls["n"] == 2:
            raise ValueError("actuator fault")
        return real(self, U)

    monkeypatch.setattr(ep.AircraftTask, "execute", flaky)
    with pytest.raises(EpisodeError, match="step 1: ValueError: actuator fault") as info:
        run_episode(None, cfg, 0, "random")
    assert info.value.step == 1


def test_learned_policy_needs_parameters():
    with pytest.raises(ValueError):
        run_episode(None, ExperimentConfig(**SMALL), 0, "ours")


def test_baseline_candidates_box_by_default():
    cfg = ExperimentConfig(**{**SMALL, "steps": 2})
    task = make_task(cfg, 1, 1, "random")
    h, _ = task.begin()
    _, diag = task.decide(None, h)
    assert diag["status"] == "box"


def test_baseline_filter_uses_learned_safe_set():
    cfg = ExperimentConfig(**{**SMALL, "steps": 2, "baseline_filter": True})
    task = make_task(cfg, 1, 1, "random")
    h, _ = task.begin()
    U, diag = task.decide(None, h)
    assert diag["status"] == "fallback" or diag["status"].startswith("safe:")


def test_meta_environments_differ_from_test_seeds():
    from safemal.harness.episodes import META_ENV_OFFSET, meta_distribution
    cfg = ExperimentConfig(**SMALL)
    t = meta_distribution(cfg)(0)
    assert not np.array_equal(t.params.A_true, make_task(cfg, 0).params.A_true)
    assert META_ENV_OFFSET > max(cfg.seeds)


# experiment ----------------------------------------------------------------

def test_run_experiment_writes_files(tmp_path):
    cfg = ExperimentConfig(**{**SMALL, "steps": 2}, policies=("ours", "random"), seeds=(0, 1))
    res = run_experiment(cfg, untrained_acquisition(cfg), tmp_path)
    assert res.exit_code == 0 and not res.failures
    assert sorted(p.name for p in (tmp_path / "episodes").iterdir()) == [
        "ours_seed0.csv", "ours_seed1.csv", "random_seed0.csv", "random_seed1.csv"]
    assert (tmp_path / "summary.csv").read_text().startswith("policy,episodes,auc_mean")
    rec = read_episode(tmp_path / "episodes" / "ours_seed1.csv",
                       tmp_path / "timing" / "ours_seed1.csv")
    m = episode_metrics(rec)
    assert res.summary["ours"]["auc"]["mean"] == pytest.approx(
        np.mean([episode_metrics(r).auc for r in res.records if r.policy == "ours"]))
    assert m.auc == pytest.approx(np.trapezoid(gain_curve(rec.errors)))


def test_run_experiment_failures_and_exit_code(monkeypatch, tmp_path):
    import safemal.harness.runner as runner
    real = runner.run_episode

    def failing(acq, cfg, seed, policy):
        if seed == 1:
            raise RuntimeError("boom")
        return real(acq, cfg, seed, policy)

    monkeypatch.setattr(runner, "run_episode", failing)
    cfg = ExperimentConfig(**{**SMALL, "steps": 1}, policies=("random",), seeds=(0, 1, 2))
    res = run_experiment(cfg, None, tmp_path)
    assert res.failures == [("random", 1, "RuntimeError: boom")]
    assert res.exit_code == 1  # 1 of 3 cells > 10 %
    assert len(res.records) == 2
    assert "boom" in (tmp_path / "failures.csv").read_text()


def test_run_experiment_byte_identical(tmp_path):
    cfg = ExperimentConfig(**{**SMALL, "steps": 2}, policies=("ours", "diversity"), seeds=(3,))
    acq = untrained_acquisition(cfg)
    run_experiment(cfg, acq, tmp_path / "a")
    run_experiment(cfg, acq, tmp_path / "b")
    for name in ("summary.csv", "episodes/ours_seed3.csv", "episodes/diversity_seed3.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_workers_pool_matches_serial(tmp_path):
    cfg = ExperimentConfig(**{**SMALL, "steps": 1}, policies=("random",), seeds=(0, 1))
    serial = run_experiment(cfg, None)
    pooled = run_experiment(cfg.with_overrides(workers=2), None)
    assert [episode_csv(r) for r in serial.records] == [episode_csv(r) for r in pooled.records]
