"""Acting loop: tasks for both domains and the test-time episode runner.

Both tasks implement the :class:`~safemal.acquisition.Task` protocol, so the
same objects drive meta-training and evaluation. Every random stream is
derived from ``(env_seed, run_seed)`` so an episode is a pure function of the
config and its seeds.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from ..acquisition import AcquisitionParams, History, compute_reward
from ..baselines import (bo_select, diversity_select, epistemic_select, lhs_candidates,
                         random_select)
from ..dynamics import EnsembleConfig, TransitionSample, linearize, predict_mean, train_ensemble
from ..envs import (SUBJECT_HYPER, AircraftConfig, GpHyper, admets_step, admets_subject,
                    aircraft_probe, aircraft_step, fit_gp, gp_posterior, optimum_error,
                    sample_damage)
from ..policy import (PolicyConfig, SafetySpec, chance_loads, enumerate_policy_1d,
                      gaussian_quantile, solve_policy)
from .config import ExperimentConfig

# offset that keeps meta-training environments disjoint from test seeds
META_ENV_OFFSET = 2 ** 31


class EpisodeError(RuntimeError):
    def __init__(self, step: int, cause: BaseException):
        super().__init__(f"step {step}: {type(cause).__name__}: {cause}")
        self.step = step


def policy_config(cfg: ExperimentConfig, lambda1: float | None = None) -> PolicyConfig:
    return PolicyConfig(
        lambda1=cfg.lambda1 if lambda1 is None else lambda1,
        slack_penalty=cfg.slack_penalty,
        margin_weight=cfg.margin_weight,
        node_limit=cfg.node_limit,
        baseline_samples=cfg.baseline_samples,
        tighten_bounds=cfg.tighten_bounds,
    )


def ensemble_config(cfg: ExperimentConfig) -> EnsembleConfig:
    return EnsembleConfig(n_members=cfg.members, hidden=cfg.ensemble_hidden,
                          epochs=cfg.ensemble_epochs, lr=cfg.ensemble_lr,
                          eval_fraction=cfg.eval_fraction)


class _Streams:
    """Independent integer seed streams for one episode."""

    NAMES = ("init", "noise", "model", "candidates")

    def __init__(self, env_seed: int, run_seed: int):
        children = np.random.SeedSequence([int(env_seed), int(run_seed)]).spawn(len(self.NAMES))
        self._rng = {n: np.random.default_rng(c) for n, c in zip(self.NAMES, children)}

    def rng(self, name: str) -> np.random.Generator:
        return self._rng[name]

    def seed(self, name: str) -> int:
        return int(self._rng[name].integers(2 ** 63 - 1))


class AircraftTask:
    """Damaged linear aircraft explored in blocks of ``horizon`` steps.

    The whole block is executed before the next decision, so every block ends
    on a return step where sphere membership is recorded.
    """

    def __init__(self, cfg: ExperimentConfig, env_seed: int, run_seed: int | None = None,
                 policy: str = "ours", lambda1: float | None = None):
        self.cfg = cfg
        self.policy = policy
        acfg = AircraftConfig(state_dim=cfg.state_dim, action_dim=cfg.action_dim,
                              noise_std=cfg.noise_std, damage_scale=cfg.damage_scale,
                              probe_points=cfg.probe_points)
        self.params = sample_damage(env_seed, acfg)
        self.probe = aircraft_probe(self.params, cfg.probe_points, seed=env_seed)
        self.state_dim, self.action_dim, self.horizon = cfg.state_dim, cfg.action_dim, cfg.horizon
        D = self.state_dim
        self.spec = SafetySpec(np.zeros(D), cfg.radius, cfg.epsilon, cfg.horizon,
                               self.params.action_lo, self.params.action_hi)
        self.action_lo, self.action_hi = self.spec.flat_bounds()
        self.pcfg = policy_config(cfg, lambda1)
        self.ecfg = ensemble_config(cfg)
        self.streams = _Streams(env_seed, env_seed if run_seed is None else run_seed)
        self.x = np.zeros(D)
        self.executed = 0
        self.data: list = []
        self.ens = None

    def model_error(self) -> float:
        X, U, Y = self.probe
        err = predict_mean(self.ens, X, U) - Y
        return float(np.mean(err * err))

    def _run_block(self, U, commit: int = 0) -> list:
        U = np.clip(np.asarray(U, dtype=float).reshape(self.spec.steps, self.action_dim),
                    self.params.action_lo, self.params.action_hi)
        if commit:
            U = U[:commit]
        new = []
        for k in range(U.shape[0]):
            nxt = aircraft_step(self.params, self.x, U[k], self.streams.seed("noise"))
            new.append(TransitionSample.make(self.x, U[k], nxt))
            self.x = nxt
        self.data.extend(new)
        return new

    def _refit(self):
        self.ens = train_ensemble(self.data, self.ecfg, seed=self.streams.seed("model"),
                                  previous=self.ens)

    def in_sphere(self) -> bool:
        return bool(np.all(np.abs(self.x - self.spec.x_ref) <= self.spec.radius))

    def begin(self) -> tuple[History, float]:
        rng = self.streams.rng("init")
        lo, hi = self.cfg.init_scale * self.action_lo, self.cfg.init_scale * self.action_hi
        for _ in range(self.cfg.init_blocks):
            self._run_block(rng.uniform(lo, hi))
        if not self.data:
            raise ValueError("need at least one initial block to fit the model")
        self._refit()
        return History(self.state_dim, self.action_dim, tuple(self.data)), self.model_error()

    def decide(self, acq: AcquisitionParams | None, history: History) -> tuple[np.ndarray, dict]:
        lin = linearize(self.ens, self.x, np.zeros(self.action_dim))
        t0 = time.perf_counter()
        if self.policy == "ours":
            U, diag = solve_policy(acq, history, lin, self.x, self.spec, self.pcfg)
            return U, {"wall_ms": diag.wall_ms, "nodes": diag.nodes, "status": diag.status}
        cands = lhs_candidates(self.action_lo, self.action_hi, self.cfg.candidates,
                               self.streams.seed("candidates"))
        status = "box"
        pool = cands
        if self.cfg.baseline_filter:
            # same safe set as the learned policy; without survivors the least-loaded block
            excess = np.array([np.max(chance_loads(lin, self.x, self.spec, c) - self.spec.radius)
                               for c in cands])
            safe = excess <= 1e-9
            pool = cands[safe] if np.any(safe) else cands[[int(np.argmin(excess))]]
            status = f"safe:{int(safe.sum())}" if np.any(safe) else "fallback"
        if self.policy == "epistemic":
            U = epistemic_select(self.ens, self.x, pool)
        elif self.policy == "diversity":
            U = diversity_select([s.u for s in history.samples], pool, self.action_dim)
        elif self.policy == "random":
            U = random_select(pool, self.streams.seed("candidates"))
        else:
            raise ValueError(f"policy {self.policy!r} is not available on the aircraft domain")
        return U, {"wall_ms": 1e3 * (time.perf_counter() - t0), "nodes": 0, "status": status}

    def execute(self, U) -> tuple[list, float, dict]:
        new = self._run_block(U, self.cfg.commit_horizon)
        self.executed += len(new)
        self._refit()
        # membership counts only at the end of each batch of T steps
        return new, self.model_error(), {"in_sphere": self.in_sphere(), "side_effect": False,
                                         "post_return": self.executed % self.spec.steps == 0}


class AdmetsTask:
    """Stimulation-amplitude search on a surrogate subject.

    The learner models scores with its own GP (same kernel as the subject,
    noise set to the observation noise). Context samples encode the state
    ``[last score, current optimum estimate]`` and the chosen amplitude.
    """

    def __init__(self, cfg: ExperimentConfig, env_seed: int, run_seed: int | None = None,
                 policy: str = "ours", lambda1: float | None = None):
        self.cfg = cfg
        self.policy = policy
        self.subject = admets_subject(env_seed, cfg.grid_points, cfg.admets_noise)
        self.grid = self.subject.grid
        self.state_dim, self.action_dim, self.horizon = 2, 1, 1
        self.action_lo = np.array([self.grid[0]])
        self.action_hi = np.array([self.grid[-1]])
        # immediate safety: the sample itself must be safe
        self.spec = SafetySpec(np.zeros(2), 1.0, cfg.epsilon, 0, self.action_lo, self.action_hi)
        self.pcfg = policy_config(cfg, lambda1)
        self.hyper = GpHyper(SUBJECT_HYPER.lengthscale, SUBJECT_HYPER.signal_var,
                             max(cfg.admets_noise ** 2, 1e-6))
        self.streams = _Streams(env_seed, env_seed if run_seed is None else run_seed)
        self.obs: list = []
        self.x = np.zeros(2)
        self.gp = None

    def _observe(self, a: float) -> tuple[TransitionSample, bool]:
        score, side = admets_step(self.subject, a, self.streams.seed("noise"))
        self.obs.append((a, score))
        self.gp = fit_gp([o[0] for o in self.obs], [o[1] for o in self.obs], self.hyper)
        nxt = np.array([score, self.estimate()])
        sample = TransitionSample.make(self.x, np.array([a]), nxt)
        self.x = nxt
        return sample, side

    def estimate(self) -> float:
        return float(self.grid[int(np.argmax(gp_posterior(self.gp, self.grid)[0]))])

    def model_error(self) -> float:
        return optimum_error(self.subject, self.estimate())

    def begin(self) -> tuple[History, float]:
        n = max(self.cfg.init_blocks, 1)
        samples = [self._observe(float(a))[0] for a in np.linspace(0.02, 0.2, n)]
        return History(2, 1, tuple(samples)), self.model_error()

    def _safe_grid(self):
        mean, std = gp_posterior(self.gp, self.grid)
        margin = mean - gaussian_quantile(1.0 - self.cfg.epsilon) * std
        return mean, std, margin

    def decide(self, acq: AcquisitionParams | None, history: History) -> tuple[np.ndarray, dict]:
        t0 = time.perf_counter()
        mean, std, margin = self._safe_grid()
        safe = margin >= 0
        pool = self.grid[safe] if np.any(safe) else self.grid[[int(np.argmax(margin))]]
        if self.policy == "ours":
            a, _ = enumerate_policy_1d(acq, history, self.grid, (mean, std), self.spec, self.pcfg)
        elif self.policy == "bo":
            a, _ = bo_select(self.obs, self.grid, self.cfg.epsilon, self.hyper)
        elif self.policy == "epistemic":
            s = np.where(safe, std, -np.inf) if np.any(safe) else -margin
            a = float(self.grid[int(np.argmax(s))])
        elif self.policy == "diversity":
            a = float(diversity_select([o[0] for o in self.obs], pool)[0])
        elif self.policy == "random":
            a = float(random_select(pool, self.streams.seed("candidates"))[0])
        else:  # pragma: no cover - validated by the config
            raise ValueError(f"unknown policy {self.policy!r}")
        return np.array([a]), {"wall_ms": 1e3 * (time.perf_counter() - t0), "nodes": 0,
                               "status": "grid"}

    def execute(self, U) -> tuple[list, float, dict]:
        a = float(np.clip(np.asarray(U, dtype=float).reshape(-1)[0], self.grid[0], self.grid[-1]))
        sample, side = self._observe(a)
        return [sample], self.model_error(), {"in_sphere": not side, "side_effect": side,
                                              "post_return": True}


def make_task(cfg: ExperimentConfig, env_seed: int, run_seed: int | None = None,
              policy: str = "ours", lambda1: float | None = None):
    cls = AircraftTask if cfg.domain == "aircraft" else AdmetsTask
    return cls(cfg, env_seed, run_seed, policy, lambda1)


def meta_distribution(cfg: ExperimentConfig):
    """``task_seed -> Task`` over environments disjoint from the test seeds."""
    def make(task_seed: int):
        return make_task(cfg, META_ENV_OFFSET + int(task_seed), policy="ours")
    return make


# ---------------------------------------------------------------------------
# records


@dataclass
class StepRow:
    step: int
    action: tuple
    reward: float
    e_prev: float
    e_t: float
    post_return: bool
    in_sphere: bool
    side_effect: bool
    nodes: int
    status: str
    wall_ms: float = 0.0


@dataclass
class EpisodeRecord:
    domain: str
    policy: str
    seed: int
    e0: float
    rows: list = field(default_factory=list)

    @property
    def errors(self) -> np.ndarray:
        return np.array([self.e0] + [r.e_t for r in self.rows])


def run_episode(acq: AcquisitionParams | None, cfg: ExperimentConfig, seed: int,
                policy: str | None = None, lambda1: float | None = None) -> EpisodeRecord:
    """Test-time loop: fit on initial data, then ``steps`` decide/execute/refit rounds."""
    policy = policy or cfg.policies[0]
    if policy == "ours" and acq is None:
        raise ValueError("the learned policy needs acquisition parameters")
    task = make_task(cfg, seed, seed, policy, lambda1)
    history, e_prev = task.begin()
    rec = EpisodeRecord(cfg.domain, policy, int(seed), float(e_prev))
    for t in range(cfg.steps):
        try:
            U, diag = task.decide(acq, history)
            new, e_curr, info = task.execute(U)
        except Exception as exc:
            raise EpisodeError(t, exc) from exc
        rec.rows.append(StepRow(
            step=t, action=tuple(float(v) for v in np.asarray(U).reshape(-1)),
            reward=compute_reward(e_prev, e_curr), e_prev=float(e_prev), e_t=float(e_curr),
            post_return=bool(info["post_return"]), in_sphere=bool(info["in_sphere"]),
            side_effect=bool(info["side_effect"]), nodes=int(diag["nodes"]),
            status=str(diag["status"]), wall_ms=float(diag["wall_ms"]),
        ))
        history = history.extended(new)
        e_prev = e_curr
    return rec
