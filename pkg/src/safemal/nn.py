"""Dense layers, LSTM and Adam with hand-derived gradients.

Tensors are plain ``float64`` numpy arrays in row-major order. Parameter
containers expose ``arrays()``/``names()``/``from_arrays()`` so the optimizer,
soft updates and checkpointing can treat them as flat lists.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("relu", "identity")


class ShapeError(ValueError):
    """Raised when array dimensions do not chain."""


class StaleCacheError(ValueError):
    """Raised when a backward pass gets a cache from different parameters."""


class DivergenceError(FloatingPointError):
    """Raised when a loss or gradient stops being finite."""


def as_param(a, name: str = "parameter") -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


@dataclass
class Dense:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "relu"

    def __post_init__(self):
        self.weight = as_param(self.weight, "weight")
        self.bias = as_param(self.bias, "bias")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"weight {self.weight.shape} and bias {self.bias.shape} do not match"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class MlpParams:
    layers: list[Dense]

    def __post_init__(self):
        for i in range(1, len(self.layers)):
            if self.layers[i].in_dim != self.layers[i - 1].out_dim:
                raise ShapeError(
                    f"layer {i} expects {self.layers[i].in_dim} inputs, "
                    f"layer {i - 1} emits {self.layers[i - 1].out_dim}"
                )

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def arrays(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def names(self) -> list[str]:
        out = []
        for i in range(len(self.layers)):
            out.extend((f"layer{i}.weight", f"layer{i}.bias"))
        return out

    def from_arrays(self, arrays: Sequence[np.ndarray]) -> "MlpParams":
        it = iter(arrays)
        return MlpParams(
            [Dense(next(it), next(it), layer.activation) for layer in self.layers]
        )

    def copy(self) -> "MlpParams":
        return self.from_arrays([a.copy() for a in self.arrays()])

    def zeros_like(self) -> "MlpParams":
        return self.from_arrays([np.zeros_like(a) for a in self.arrays()])


@dataclass
class MlpCache:
    weights: tuple
    inputs: list  # input to each layer
    pre: list  # pre-activation of each layer
    batched: bool


def init_mlp(sizes: Sequence[int], rng: np.random.Generator,
             activations: Sequence[str] | None = None) -> MlpParams:
    """Uniform(+-1/sqrt(fan_in)) initialised MLP.

    ``activations`` defaults to relu on hidden layers and identity on the last.
    """
    n = len(sizes) - 1
    if n < 1:
        raise ShapeError("an MLP needs at least one layer")
    if activations is None:
        activations = ["relu"] * (n - 1) + ["identity"]
    layers = []
    for i in range(n):
        lim = 1.0 / np.sqrt(sizes[i])
        layers.append(Dense(
            rng.uniform(-lim, lim, size=(sizes[i + 1], sizes[i])),
            rng.uniform(-lim, lim, size=sizes[i + 1]),
            activations[i],
        ))
    return MlpParams(layers)


def mlp_forward(params: MlpParams, x) -> tuple[np.ndarray, MlpCache]:
    """Evaluate the network on a vector ``(in,)`` or a batch ``(n, in)``."""
    h = np.asarray(x, dtype=np.float64)
    batched = h.ndim == 2
    if h.ndim not in (1, 2):
        raise ShapeError(f"input must be 1-D or 2-D, got shape {h.shape}")
    inputs, pre = [], []
    for i, layer in enumerate(params.layers):
        if h.shape[-1] != layer.in_dim:
            raise ShapeError(
                f"layer {i}: expected input dim {layer.in_dim}, got {h.shape[-1]}"
            )
        inputs.append(h)
        a = h @ layer.weight.T + layer.bias
        pre.append(a)
        h = np.maximum(a, 0.0) if layer.activation == "relu" else a
    cache = MlpCache(tuple(l.weight for l in params.layers), inputs, pre, batched)
    return h, cache


def _check_cache(params: MlpParams, cache: MlpCache):
    if len(cache.weights) != len(params.layers) or any(
        w is not l.weight for w, l in zip(cache.weights, params.layers)
    ):
        raise StaleCacheError("cache was produced by different parameters")


def mlp_backward(params: MlpParams, cache: MlpCache, grad_output):
    """Backpropagate ``grad_output`` (same shape as the forward output).

    Returns ``(param_grads, grad_input)``; batched gradients are summed over rows.
    """
    _check_cache(params, cache)
    g = np.asarray(grad_output, dtype=np.float64)
    expected = cache.pre[-1].shape
    if g.shape != expected:
        raise ShapeError(f"grad_output shape {g.shape} != output shape {expected}")
    grads: list[Dense | None] = [None] * len(params.layers)
    for i in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[i]
        if layer.activation == "relu":
            g = g * (cache.pre[i] > 0.0)
        x = cache.inputs[i]
        if cache.batched:
            gw, gb = g.T @ x, g.sum(axis=0)
        else:
            gw, gb = np.outer(g, x), g.copy()
        grads[i] = Dense(gw, gb, layer.activation)
        g = g @ layer.weight
    return MlpParams(grads), g


# ---------------------------------------------------------------------------
# LSTM

GATES = ("i", "f", "o", "g")


@dataclass
class LstmParams:
    input_dim: int
    hidden_dim: int
    W: dict = field(default_factory=dict)  # gate -> (hidden, input + hidden)
    b: dict = field(default_factory=dict)  # gate -> (hidden,)

    def __post_init__(self):
        shape = (self.hidden_dim, self.input_dim + self.hidden_dim)
        for k in GATES:
            self.W[k] = as_param(self.W[k], f"W_{k}")
            self.b[k] = as_param(self.b[k], f"b_{k}")
            if self.W[k].shape != shape or self.b[k].shape != (self.hidden_dim,):
                raise ShapeError(f"gate {k} has wrong shape {self.W[k].shape}")

    def arrays(self) -> list[np.ndarray]:
        return [self.W[k] for k in GATES] + [self.b[k] for k in GATES]

    def names(self) -> list[str]:
        return [f"W_{k}" for k in GATES] + [f"b_{k}" for k in GATES]

    def from_arrays(self, arrays: Sequence[np.ndarray]) -> "LstmParams":
        arrays = list(arrays)
        return LstmParams(
            self.input_dim, self.hidden_dim,
            dict(zip(GATES, arrays[:4])), dict(zip(GATES, arrays[4:])),
        )

    def copy(self) -> "LstmParams":
        return self.from_arrays([a.copy() for a in self.arrays()])

    def zeros_like(self) -> "LstmParams":
        return self.from_arrays([np.zeros_like(a) for a in self.arrays()])


def init_lstm(input_dim: int, hidden_dim: int, rng: np.random.Generator) -> LstmParams:
    lim = 1.0 / np.sqrt(input_dim + hidden_dim)
    W = {k: rng.uniform(-lim, lim, size=(hidden_dim, input_dim + hidden_dim))
         for k in GATES}
    b = {k: rng.uniform(-lim, lim, size=hidden_dim) for k in GATES}
    b["f"] = np.ones(hidden_dim)
    return LstmParams(input_dim, hidden_dim, W, b)


@dataclass
class LstmCache:
    weights: tuple
    xh: list
    gates: list  # (i, f, o, g) per step
    cells: list  # c_t per step, c_{-1} excluded
    cell_init: np.ndarray


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def lstm_forward(params: LstmParams, sequence):
    """Run the recursion over ``sequence`` (list of ``(input_dim,)`` vectors).

    Returns ``(hiddens, final_h, cache)``; an empty sequence yields a zero state.
    """
    H = params.hidden_dim
    h = np.zeros(H)
    c = np.zeros(H)
    W = np.vstack([params.W[k] for k in GATES])
    bias = np.concatenate([params.b[k] for k in GATES])
    hiddens, xhs, gates, cells = [], [], [], []
    for t, x in enumerate(sequence):
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (params.input_dim,):
            raise ShapeError(
                f"step {t}: expected input of shape ({params.input_dim},), got {x.shape}"
            )
        xh = np.concatenate([x, h])
        a = W @ xh + bias
        i, f, o = _sigmoid(a[:H]), _sigmoid(a[H:2 * H]), _sigmoid(a[2 * H:3 * H])
        g = np.tanh(a[3 * H:])
        c = f * c + i * g
        h = o * np.tanh(c)
        xhs.append(xh)
        gates.append((i, f, o, g))
        cells.append(c)
        hiddens.append(h)
    cache = LstmCache(tuple(params.arrays()), xhs, gates, cells, np.zeros(H))
    return hiddens, h, cache


def lstm_backward(params: LstmParams, cache: LstmCache, grad_final_h) -> LstmParams:
    """Backpropagation through time for a loss that depends on ``final_h`` only."""
    arrays = params.arrays()
    if len(cache.weights) != len(arrays) or any(
        a is not b for a, b in zip(cache.weights, arrays)
    ):
        raise StaleCacheError("cache was produced by different parameters")
    H, D = params.hidden_dim, params.input_dim
    dh = np.asarray(grad_final_h, dtype=np.float64)
    if dh.shape != (H,):
        raise ShapeError(f"grad_final_h shape {dh.shape} != ({H},)")
    W = np.vstack([params.W[k] for k in GATES])
    dW = np.zeros_like(W)
    db = np.zeros(4 * H)
    dc = np.zeros(H)
    for t in range(len(cache.xh) - 1, -1, -1):
        i, f, o, g = cache.gates[t]
        c = cache.cells[t]
        c_prev = cache.cells[t - 1] if t > 0 else cache.cell_init
        tc = np.tanh(c)
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc * tc)
        di = dc * g
        dg = dc * i
        df = dc * c_prev
        da = np.concatenate([
            di * i * (1.0 - i),
            df * f * (1.0 - f),
            do * o * (1.0 - o),
            dg * (1.0 - g * g),
        ])
        dW += np.outer(da, cache.xh[t])
        db += da
        dh = (W.T @ da)[D:]
        dc = dc * f
    Wg = {k: dW[n * H:(n + 1) * H] for n, k in enumerate(GATES)}
    bg = {k: db[n * H:(n + 1) * H] for n, k in enumerate(GATES)}
    return LstmParams(D, H, Wg, bg)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, arrays: Sequence[np.ndarray], **hyper) -> "AdamState":
        return cls([np.zeros_like(a) for a in arrays],
                   [np.zeros_like(a) for a in arrays], **hyper)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              state: AdamState) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update. Inputs are left untouched."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and moments must have the same length")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or m.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient entries")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        p = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_p.append(p)
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t, state.lr, b1, b2, state.eps)


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise DivergenceError(f"f is not finite near coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
