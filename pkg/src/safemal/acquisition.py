"""Learned acquisition function and its DQN meta-training loop.

The acquisition value of a block of actions ``U`` given the data collected so
far is ``Q(U, z)``, where ``z`` is a context embedding produced by an LSTM over
the history concatenated with summary statistics and passed through one relu
layer. The Q-head is a relu MLP so it can be encoded exactly in a MILP.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .dynamics import TransitionSample
from .nn import (
    AdamState, DivergenceError, LstmParams, MlpParams, ShapeError, adam_step, init_lstm,
    init_mlp, lstm_backward, lstm_forward, mlp_backward, mlp_forward,
)

log = logging.getLogger(__name__)

REWARD_DELTA = 1e-9


# ---------------------------------------------------------------------------
# history and context


@dataclass(frozen=True)
class History:
    state_dim: int
    action_dim: int
    samples: tuple = ()

    def __post_init__(self):
        for i, s in enumerate(self.samples):
            if s.x.size != self.state_dim or s.u.size != self.action_dim or \
                    s.x_next.size != self.state_dim:
                raise ShapeError(f"sample {i} does not match dims ({self.state_dim}, {self.action_dim})")

    def extended(self, new: Sequence[TransitionSample]) -> "History":
        return History(self.state_dim, self.action_dim, self.samples + tuple(new))

    def __len__(self):
        return len(self.samples)

    def steps(self) -> list[np.ndarray]:
        return [np.concatenate([s.x, s.u]) for s in self.samples]


def stats_features(history: History) -> np.ndarray:
    """``[mean(x), mean(u), std(x), std(u)]`` with the population std; zeros when empty."""
    D, J = history.state_dim, history.action_dim
    if len(history) == 0:
        return np.zeros(2 * (D + J))
    data = np.array(history.steps())
    return np.concatenate([data.mean(axis=0), data.std(axis=0)])


@dataclass
class AcquisitionParams:
    encoder: LstmParams
    fc: MlpParams
    q_head: MlpParams
    state_dim: int
    action_dim: int
    horizon: int  # action steps per decision

    def __post_init__(self):
        D, J = self.state_dim, self.action_dim
        if self.encoder.input_dim != D + J:
            raise ShapeError("encoder input must be D + J")
        if self.fc.in_dim != self.encoder.hidden_dim + 2 * (D + J):
            raise ShapeError("fc input must be hidden + 2(D + J)")
        if len(self.fc.layers) != 1 or self.fc.layers[0].activation != "relu":
            raise ShapeError("fc must be a single relu layer")
        if self.q_head.in_dim != J * self.horizon + self.fc.out_dim or self.q_head.out_dim != 1:
            raise ShapeError("q-head must map J*T + Z inputs to a scalar")

    @property
    def z_dim(self) -> int:
        return self.fc.out_dim

    @property
    def n_actions(self) -> int:
        return self.action_dim * self.horizon

    def arrays(self) -> list[np.ndarray]:
        return self.encoder.arrays() + self.fc.arrays() + self.q_head.arrays()

    def names(self) -> list[str]:
        return (["encoder." + n for n in self.encoder.names()]
                + ["fc." + n for n in self.fc.names()]
                + ["q_head." + n for n in self.q_head.names()])

    def from_arrays(self, arrays: Sequence[np.ndarray]) -> "AcquisitionParams":
        ne, nf = len(self.encoder.arrays()), len(self.fc.arrays())
        arrays = list(arrays)
        return AcquisitionParams(
            self.encoder.from_arrays(arrays[:ne]),
            self.fc.from_arrays(arrays[ne:ne + nf]),
            self.q_head.from_arrays(arrays[ne + nf:]),
            self.state_dim, self.action_dim, self.horizon,
        )

    def copy(self) -> "AcquisitionParams":
        return self.from_arrays([a.copy() for a in self.arrays()])


def init_acquisition(state_dim: int, action_dim: int, horizon: int, rng: np.random.Generator,
                     hidden: int = 16, z_dim: int = 8, q_hidden: Sequence[int] = (8, 8)
                     ) -> AcquisitionParams:
    D, J = state_dim, action_dim
    enc = init_lstm(D + J, hidden, rng)
    fc = init_mlp([hidden + 2 * (D + J), z_dim], rng, activations=["relu"])
    q = init_mlp([J * horizon + z_dim, *q_hidden, 1], rng)
    return AcquisitionParams(enc, fc, q, D, J, horizon)


@dataclass
class _ContextCache:
    lstm: object
    fc: object
    hidden_dim: int


def _context_forward(params: AcquisitionParams, history: History):
    if history.state_dim != params.state_dim or history.action_dim != params.action_dim:
        raise ShapeError(
            f"history dims ({history.state_dim}, {history.action_dim}) do not match "
            f"acquisition dims ({params.state_dim}, {params.action_dim})"
        )
    _, h, lcache = lstm_forward(params.encoder, history.steps())
    feat = np.concatenate([h, stats_features(history)])
    z, fcache = mlp_forward(params.fc, feat)
    return z, _ContextCache(lcache, fcache, params.encoder.hidden_dim)


def encode_context(params: AcquisitionParams, history: History) -> np.ndarray:
    return _context_forward(params, history)[0]


def q_forward(q_head: MlpParams, z, U_flat) -> float:
    U_flat = np.asarray(U_flat, dtype=float).reshape(-1)
    z = np.asarray(z, dtype=float).reshape(-1)
    if U_flat.size + z.size != q_head.in_dim:
        raise ShapeError(f"q-head expects {q_head.in_dim} inputs, got {U_flat.size}+{z.size}")
    out, _ = mlp_forward(q_head, np.concatenate([U_flat, z]))
    return float(out[0])


def q_values(q_head: MlpParams, z, U_batch) -> np.ndarray:
    """Q at each row of ``U_batch``."""
    U_batch = np.atleast_2d(np.asarray(U_batch, dtype=float))
    z = np.asarray(z, dtype=float).reshape(-1)
    if U_batch.shape[1] + z.size != q_head.in_dim:
        raise ShapeError(f"q-head expects {q_head.in_dim} inputs, got {U_batch.shape[1]}+{z.size}")
    inp = np.hstack([U_batch, np.broadcast_to(z, (U_batch.shape[0], z.size))])
    return mlp_forward(q_head, inp)[0][:, 0]


def q_baseline(q_head: MlpParams, z, lo, hi, K: int = 64, seed=0) -> float:
    """Monte-Carlo mean of Q over ``K`` uniform actions in the box."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if K < 1:
        raise ValueError("K must be at least 1")
    if np.any(lo > hi) or not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ValueError("action bounds must be finite with lo <= hi")
    U = np.random.default_rng(seed).uniform(lo, hi, size=(K, lo.size))
    return float(np.mean(q_values(q_head, z, U)))


def compute_reward(e_prev: float, e_curr: float) -> float:
    """Relative error decrease, clipped to [-1, 1]."""
    if not (np.isfinite(e_prev) and np.isfinite(e_curr)):
        raise ValueError("errors must be finite")
    if e_prev < 0 or e_curr < 0:
        raise ValueError("errors must be nonnegative")
    r = (e_prev - e_curr) / max(e_prev, REWARD_DELTA)
    return float(np.clip(r, -1.0, 1.0))


# ---------------------------------------------------------------------------
# DQN


@dataclass(frozen=True)
class Experience:
    history: History
    action: np.ndarray
    reward: float
    next_history: History
    terminal: bool


class ReplayBuffer:
    """Fixed-capacity FIFO store of experiences."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items = deque(maxlen=capacity)

    def push(self, item: Experience):
        self._items.append(item)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]

    def sample(self, batch_size: int, rng: np.random.Generator) -> list:
        if len(self._items) == 0:
            raise ValueError("cannot sample from an empty buffer")
        n = min(batch_size, len(self._items))
        idx = rng.choice(len(self._items), size=n, replace=False)
        return [self._items[i] for i in sorted(idx)]


def dqn_target(target: AcquisitionParams, next_history: History, candidates, r: float,
               gamma: float, terminal: bool) -> float:
    """``r + gamma * max_k Q_target(candidate_k, z')``, or ``r`` at episode end."""
    if terminal or gamma == 0.0:
        return float(r)
    cands = np.atleast_2d(np.asarray(candidates, dtype=float))
    if cands.shape[0] < 1:
        raise ValueError("need at least one candidate")
    z = encode_context(target, next_history)
    return float(r + gamma * np.max(q_values(target.q_head, z, cands)))


def dqn_loss_and_grads(params: AcquisitionParams, batch: Sequence[Experience], targets
                       ) -> tuple[float, list[np.ndarray]]:
    """Mean squared Bellman residual and its gradient over every parameter."""
    if len(batch) == 0:
        raise ValueError("batch is empty")
    grads = [np.zeros_like(a) for a in params.arrays()]
    loss = 0.0
    H = params.encoder.hidden_dim
    n = len(batch)
    for exp, y in zip(batch, targets):
        z, ctx = _context_forward(params, exp.history)
        q_in = np.concatenate([np.asarray(exp.action, dtype=float).reshape(-1), z])
        out, qcache = mlp_forward(params.q_head, q_in)
        err = float(out[0]) - y
        loss += err * err / n
        gq, gin = mlp_backward(params.q_head, qcache, np.array([2.0 * err / n]))
        gz = gin[params.n_actions:]
        gfc, gfeat = mlp_backward(params.fc, ctx.fc, gz)
        glstm = lstm_backward(params.encoder, ctx.lstm, gfeat[:H])
        for acc, g in zip(grads, glstm.arrays() + gfc.arrays() + gq.arrays()):
            acc += g
    if not np.isfinite(loss):
        raise DivergenceError("non-finite Bellman loss")
    return loss, grads


def dqn_update(params: AcquisitionParams, target: AcquisitionParams, batch: Sequence[Experience],
               gamma: float, opt: AdamState, candidates) -> tuple[AcquisitionParams, float, AdamState]:
    """One Adam step on the Bellman residual; targets come from the target network."""
    ys = [dqn_target(target, e.next_history, candidates, e.reward, gamma, e.terminal)
          for e in batch]
    loss, grads = dqn_loss_and_grads(params, batch, ys)
    new, opt = adam_step(params.arrays(), grads, opt)
    return params.from_arrays(new), loss, opt


def soft_update(theta: AcquisitionParams, phi: AcquisitionParams, tau: float) -> AcquisitionParams:
    """Polyak average ``tau * theta + (1 - tau) * phi``."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must be in [0, 1]")
    a, b = theta.arrays(), phi.arrays()
    if len(a) != len(b) or any(x.shape != y.shape for x, y in zip(a, b)):
        raise ShapeError("theta and phi shapes differ")
    return phi.from_arrays([tau * x + (1.0 - tau) * y for x, y in zip(a, b)])


# ---------------------------------------------------------------------------
# meta-training


class Task(Protocol):
    """One sampled environment seen through the acting loop.

    ``begin`` collects the initial samples and fits the model; ``decide``
    solves for an action block; ``execute`` runs it, refits the model and
    returns the new samples and the model error after refitting.
    """

    state_dim: int
    action_dim: int
    horizon: int
    action_lo: np.ndarray  # flattened, length action_dim * horizon
    action_hi: np.ndarray

    def begin(self) -> tuple[History, float]: ...

    def decide(self, acq: AcquisitionParams, history: History) -> tuple[np.ndarray, dict]: ...

    def execute(self, U: np.ndarray) -> tuple[list, float, dict]: ...


@dataclass(frozen=True)
class MetaConfig:
    episodes: int = 500
    steps: int = 5
    gamma: float = 0.9
    tau: float = 0.05
    buffer_capacity: int = 5000
    batch_size: int = 16
    lr: float = 1e-3
    noise_start: float = 0.3
    noise_end: float = 0.05
    target_candidates: int = 64
    hidden: int = 16
    z_dim: int = 8
    q_hidden: tuple = (8, 8)

    def __post_init__(self):
        if self.episodes < 1 or self.steps < 1:
            raise ValueError("episodes and steps must be positive")
        if not 0.0 <= self.gamma <= 1.0 or not 0.0 <= self.tau <= 1.0:
            raise ValueError("gamma and tau must be in [0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


def exploration_scale(cfg: MetaConfig, episode: int) -> float:
    """Noise std as a fraction of the action range, linear from start to end."""
    if cfg.episodes == 1:
        return cfg.noise_start
    frac = episode / (cfg.episodes - 1)
    return cfg.noise_start + frac * (cfg.noise_end - cfg.noise_start)


@dataclass
class MetaTrainLog:
    losses: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    skipped: int = 0
    buffer_size: int = 0


def meta_train(env_distribution: Callable[[int], Task], config: MetaConfig, seed: int = 0,
               init: AcquisitionParams | None = None, record: MetaTrainLog | None = None
               ) -> AcquisitionParams:
    """DQN over sampled tasks; returns the online parameters.

    ``env_distribution(task_seed)`` must return a fresh :class:`Task`.
    """
    ss = np.random.SeedSequence(seed)
    init_ss, loop_ss = ss.spawn(2)
    rng = np.random.default_rng(loop_ss)
    record = record if record is not None else MetaTrainLog()
    buffer = ReplayBuffer(config.buffer_capacity)
    theta = init
    phi = opt = None
    for ep in range(config.episodes):
        task_seed = int(rng.integers(2**31))
        task = env_distribution(task_seed)
        if theta is None:
            theta = init_acquisition(task.state_dim, task.action_dim, task.horizon,
                                     np.random.default_rng(init_ss), config.hidden,
                                     config.z_dim, config.q_hidden)
        if phi is None:
            phi = theta.copy()
            opt = AdamState.for_params(theta.arrays(), lr=config.lr)
        noise = exploration_scale(config, ep)
        span = task.action_hi - task.action_lo
        try:
            history, e_prev = task.begin()
            for step in range(config.steps):
                U, _ = task.decide(theta, history)
                U = np.clip(U + rng.normal(size=U.shape) * noise * span,
                            task.action_lo, task.action_hi)
                new, e_curr, _ = task.execute(U)
                r = compute_reward(e_prev, e_curr)
                nxt = history.extended(new)
                buffer.push(Experience(history, U, r, nxt, step == config.steps - 1))
                record.rewards.append(r)
                batch = buffer.sample(config.batch_size, rng)
                cands = rng.uniform(task.action_lo, task.action_hi,
                                    size=(config.target_candidates, task.action_lo.size))
                theta, loss, opt = dqn_update(theta, phi, batch, config.gamma, opt, cands)
                phi = soft_update(theta, phi, config.tau)
                record.losses.append(loss)
                history, e_prev = nxt, e_curr
        except InfeasibleSolveError as exc:
            record.skipped += 1
            log.warning("episode %d skipped: %s", ep, exc)
    record.buffer_size = len(buffer)
    if record.skipped:
        log.info("meta-training skipped %d of %d episodes", record.skipped, config.episodes)
    return theta


class InfeasibleSolveError(RuntimeError):
    """The policy MILP had no solution under any relaxation."""
