"""Dense numeric kernel: parameters, layers with analytic backward passes, Adam.

Arrays are plain ``numpy.ndarray`` objects. Storage defaults to float32;
reductions (matrix products, pooled sums, loss sums) accumulate in float64
and are cast back to the storage dtype.

Layers cache what they need during ``forward`` and consume that cache in
``backward``. Gradients accumulate into ``Parameter.grad`` until
``zero_grad`` is called, so a batch loss is the plain sum over instances.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import ConfigError, IdLookupError, ShapeError, StateError

DTYPE = np.float32
ACC = np.float64
PROB_EPS = 1e-7

ACTIVATIONS = ("identity", "relu", "sigmoid")


# --------------------------------------------------------------------------
# randomness
# --------------------------------------------------------------------------


def make_rng(seed: int) -> np.random.Generator:
    """Return a Philox-4x64 counter-based generator seeded with ``seed``.

    Philox output depends only on (key, counter), so a given seed yields
    the same stream on every platform numpy supports.
    """
    if seed < 0 or seed >= 2**64:
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return np.random.Generator(np.random.Philox(int(seed)))


def derive_seed(seed: int, *keys) -> int:
    """Deterministically derive an independent u64 seed from ``seed`` and labels."""
    h = hashlib.sha256(str(int(seed)).encode())
    for key in keys:
        h.update(b"\x00" + str(key).encode())
    return int.from_bytes(h.digest()[:8], "little")


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------


@dataclass(eq=False)
class Parameter:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)
    step_count: int = 0

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self):
        self.grad.fill(0)

    def reset_optimizer_state(self):
        self.m.fill(0)
        self.v.fill(0)
        self.step_count = 0

    def astype(self, dtype) -> "Parameter":
        p = Parameter(self.name, self.value.astype(dtype))
        return p


def xavier_init(shape, rng: np.random.Generator, dtype=DTYPE) -> np.ndarray:
    """Glorot-uniform draw on ``[-a, a]`` with ``a = sqrt(6 / (fan_in + fan_out))``.

    For a rank-2 shape ``(out, in)`` fan_in is ``in`` and fan_out is ``out``;
    a rank-1 shape ``(n,)`` uses fan_in ``n`` and fan_out 1.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) not in (1, 2) or any(s <= 0 for s in shape):
        raise ShapeError(f"xavier_init needs a rank-1 or rank-2 positive shape, got {shape}")
    if len(shape) == 1:
        fan_in, fan_out = shape[0], 1
    else:
        fan_out, fan_in = shape
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(dtype)


# --------------------------------------------------------------------------
# functional forward ops
# --------------------------------------------------------------------------


def sigmoid(z):
    z = np.asarray(z)
    out = np.empty_like(z, dtype=np.result_type(z, DTYPE))
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def relu(z):
    return np.maximum(z, 0)


def _activate(z, act):
    if act == "identity":
        return z
    if act == "relu":
        return relu(z)
    if act == "sigmoid":
        return sigmoid(z)
    raise ConfigError(f"unknown activation {act!r}; expected one of {ACTIVATIONS}")


def dense_forward(W, b, x, act: str = "identity") -> np.ndarray:
    """``act(W @ x + b)`` for a single vector ``x`` or a row batch ``x[B, in]``."""
    W = np.asarray(W)
    b = np.asarray(b)
    x = np.asarray(x)
    if W.ndim != 2 or b.shape != (W.shape[0],) or x.shape[-1:] != (W.shape[1],):
        raise ShapeError(
            f"dense_forward: W{W.shape}, b{b.shape}, x{x.shape} do not agree"
        )
    z = x.astype(ACC) @ W.T.astype(ACC) + b
    return _activate(z.astype(W.dtype), act)


def elementwise_mul(p, q) -> np.ndarray:
    p = np.asarray(p)
    q = np.asarray(q)
    if p.shape != q.shape:
        raise ShapeError(f"elementwise_mul: shapes {p.shape} and {q.shape} differ")
    return p * q


def _check_indices(indices, mask, num_rows):
    live = indices[mask]
    if live.size and (live.min() < 0 or live.max() >= num_rows):
        bad = live[(live < 0) | (live >= num_rows)][0]
        raise IdLookupError(f"index {int(bad)} outside embedding table of {num_rows} rows")


def embedding_lookup_avg(table, indices, mask) -> np.ndarray:
    """Mean of ``table`` rows at positions where ``mask`` is true.

    Accepts one sequence (``indices[L]``) or a batch (``indices[B, L]``).
    A sequence with no true mask entries pools to the zero vector.
    """
    table = np.asarray(table)
    indices = np.asarray(indices, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if indices.shape != mask.shape:
        raise ShapeError(f"indices{indices.shape} and mask{mask.shape} differ in shape")
    _check_indices(indices, mask, table.shape[0])
    safe = np.where(mask, indices, 0)
    rows = table[safe].astype(ACC) * mask[..., None]
    counts = mask.sum(axis=-1, keepdims=True)
    pooled = rows.sum(axis=-2) / np.maximum(counts, 1)
    return pooled.astype(table.dtype)


def clamp_prob(pred):
    return np.clip(pred, PROB_EPS, 1.0 - PROB_EPS)


def bce_loss(pred, label):
    """Per-instance binary cross entropy on clamped probabilities."""
    p = clamp_prob(np.asarray(pred, dtype=ACC))
    y = np.asarray(label, dtype=ACC)
    return -(y * np.log(p) + (1.0 - y) * np.log1p(-p))


def bce_sum(pred, label) -> float:
    """Summed binary cross entropy over a batch (float64 accumulation)."""
    return float(np.sum(bce_loss(pred, label), dtype=ACC))


# --------------------------------------------------------------------------
# layers with cached backward
# --------------------------------------------------------------------------


class Layer:
    def parameters(self) -> list[Parameter]:
        raise NotImplementedError

    def _take_cache(self):
        if self._cache is None:
            raise StateError(f"{type(self).__name__}.backward called without a forward pass")
        cache, self._cache = self._cache, None
        return cache


class Dense(Layer):
    """Fully connected layer ``act(x @ W.T + b)`` with ``W[out, in]``."""

    def __init__(self, name, in_dim, out_dim, act="identity", rng=None, dtype=DTYPE):
        if act not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {act!r}")
        if rng is None:
            w = np.zeros((out_dim, in_dim), dtype=dtype)
        else:
            w = xavier_init((out_dim, in_dim), rng, dtype)
        self.W = Parameter(f"{name}.W", w)
        self.b = Parameter(f"{name}.b", np.zeros(out_dim, dtype=dtype))
        self.act = act
        self._cache = None

    @property
    def in_dim(self):
        return self.W.shape[1]

    @property
    def out_dim(self):
        return self.W.shape[0]

    def parameters(self):
        return [self.W, self.b]

    def forward(self, x):
        y = dense_forward(self.W.value, self.b.value, x, self.act)
        self._cache = (x, y)
        return y

    def backward(self, dy, need_input_grad=True):
        x, y = self._take_cache()
        dy = np.asarray(dy, dtype=ACC)
        if self.act == "relu":
            dy = dy * (y > 0)
        elif self.act == "sigmoid":
            dy = dy * y * (1.0 - y)
        x64 = np.asarray(x, dtype=ACC)
        self.W.grad += (dy.T @ x64).astype(self.W.grad.dtype)
        self.b.grad += dy.sum(axis=0).astype(self.b.grad.dtype)
        if need_input_grad:
            return (dy @ self.W.value.astype(ACC)).astype(self.W.value.dtype)
        return None


class Embedding(Layer):
    """Id-to-row lookup table."""

    def __init__(self, name, num_rows, dim, rng=None, dtype=DTYPE):
        if rng is None:
            t = np.zeros((num_rows, dim), dtype=dtype)
        else:
            t = xavier_init((num_rows, dim), rng, dtype)
        self.table = Parameter(f"{name}.table", t)
        self._cache = None

    @property
    def num_rows(self):
        return self.table.shape[0]

    @property
    def dim(self):
        return self.table.shape[1]

    def parameters(self):
        return [self.table]

    def forward(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.num_rows):
            bad = ids[(ids < 0) | (ids >= self.num_rows)][0]
            raise IdLookupError(
                f"{self.table.name}: id {int(bad)} outside [0, {self.num_rows})"
            )
        self._cache = ids
        return self.table.value[ids]

    def backward(self, dy):
        ids = self._take_cache()
        np.add.at(self.table.grad, ids, np.asarray(dy, dtype=self.table.grad.dtype))


class PooledEmbedding(Layer):
    """Embedding table followed by average pooling over masked positions."""

    def __init__(self, name, num_rows, dim, rng=None, dtype=DTYPE):
        self.emb = Embedding(name, num_rows, dim, rng, dtype)
        self._cache = None

    @property
    def table(self):
        return self.emb.table

    def parameters(self):
        return [self.emb.table]

    def forward(self, indices, mask):
        indices = np.asarray(indices, dtype=np.int64)
        mask = np.asarray(mask, dtype=bool)
        out = embedding_lookup_avg(self.emb.table.value, indices, mask)
        self._cache = (indices, mask)
        return out

    def backward(self, dy):
        indices, mask = self._take_cache()
        counts = np.maximum(mask.sum(axis=-1, keepdims=True), 1)
        weights = mask / counts
        contrib = np.asarray(dy, dtype=ACC)[..., None, :] * weights[..., None]
        live = mask.reshape(-1)
        np.add.at(
            self.emb.table.grad,
            indices.reshape(-1)[live],
            contrib.reshape(-1, contrib.shape[-1])[live].astype(self.emb.table.grad.dtype),
        )


# --------------------------------------------------------------------------
# optimisation
# --------------------------------------------------------------------------


def adam_step(param: Parameter, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update of ``param`` from its current gradient.

    The gradient buffer is left untouched; callers zero it explicitly.
    """
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    g = param.grad.astype(ACC)
    param.step_count += 1
    t = param.step_count
    m = beta1 * param.m.astype(ACC) + (1.0 - beta1) * g
    v = beta2 * param.v.astype(ACC) + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    update = lr * m_hat / (np.sqrt(v_hat) + eps)
    param.m[...] = m
    param.v[...] = v
    param.value[...] = param.value.astype(ACC) - update


class Adam:
    def __init__(self, params: Iterable[Parameter], lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        if not lr > 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def step(self):
        for p in self.params:
            adam_step(p, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()
