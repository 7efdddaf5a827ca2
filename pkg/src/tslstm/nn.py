"""Parametric cells with hand-derived backward passes.

All cells accept either a single vector (shape ``(n,)``) or a batch of row
vectors (shape ``(batch, n)``). Weight matrices follow the ``W @ x`` convention
of the usual math notation, i.e. a weight mapping width ``n`` to width ``h`` has
shape ``(h, n)``. The four gate blocks of an LSTM are stacked along the rows
in the order forget, input, output, candidate.
"""

from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from .errors import ConfigError, ShapeError, VocabularyError
from .tensor import DTYPE, sigmoid, softmax, tanh

GATES = ("f", "i", "o", "g")

INIT_RANGE = 0.08
FORGET_BIAS = 1.0


class _Tensors:
    """Mixin for dataclasses whose fields are all float arrays."""

    def tensors(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def zeros_like(self):
        return type(self)(**{k: np.zeros_like(v) for k, v in self.tensors().items()})

    def copy(self):
        return type(self)(**{k: v.copy() for k, v in self.tensors().items()})


@dataclass
class LstmParams(_Tensors):
    wx: np.ndarray  # (4h, input)
    wh: np.ndarray  # (4h, h)
    b: np.ndarray   # (4h,)

    @property
    def hidden_size(self) -> int:
        return self.wh.shape[1]

    @property
    def input_size(self) -> int:
        return self.wx.shape[1]

    def gate(self, name: str, which: str = "wx") -> np.ndarray:
        """View of one gate block, e.g. ``p.gate("f", "wh")`` is W_hf."""
        k = GATES.index(name)
        h = self.hidden_size
        return getattr(self, which)[k * h:(k + 1) * h]

    def __post_init__(self):
        h = self.wh.shape[1]
        if self.wh.shape != (4 * h, h) or self.wx.shape[0] != 4 * h or self.b.shape != (4 * h,):
            raise ShapeError(
                f"inconsistent LSTM blocks: wx {self.wx.shape}, wh {self.wh.shape}, b {self.b.shape}")


@dataclass
class MlstmParams(LstmParams):
    wy: np.ndarray = field(default=None)  # (4h, fused)

    @property
    def context_size(self) -> int:
        return self.wy.shape[1]

    def __post_init__(self):
        super().__post_init__()
        if self.wy is None or self.wy.ndim != 2 or self.wy.shape[0] != self.wx.shape[0]:
            raise ShapeError(f"context weights must have {self.wx.shape[0]} rows")

    def shared(self) -> LstmParams:
        """The plain-LSTM sub-parameters (no context weights)."""
        return LstmParams(self.wx, self.wh, self.b)


@dataclass
class EmbeddingParams(_Tensors):
    W_s: np.ndarray  # (embed, vocab)


@dataclass
class OutputParams(_Tensors):
    W_f: np.ndarray  # (vocab, hidden)
    b_f: np.ndarray  # (vocab,)


@dataclass
class LstmState:
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, hidden: int, batch: Optional[int] = None) -> "LstmState":
        shape = (hidden,) if batch is None else (batch, hidden)
        return cls(np.zeros(shape, DTYPE), np.zeros(shape, DTYPE))


@dataclass
class CellCache:
    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    z: np.ndarray  # gate pre-activations, (..., 4h)
    f: np.ndarray
    i: np.ndarray
    o: np.ndarray
    g: np.ndarray
    c: np.ndarray
    tanh_c: np.ndarray
    y: Optional[np.ndarray] = None


def init_lstm(rng: np.random.Generator, input_size: int, hidden: int) -> LstmParams:
    u = lambda *shape: rng.uniform(-INIT_RANGE, INIT_RANGE, size=shape)
    b = np.zeros(4 * hidden, DTYPE)
    b[:hidden] = FORGET_BIAS
    return LstmParams(u(4 * hidden, input_size), u(4 * hidden, hidden), b)


def init_mlstm(rng, input_size: int, hidden: int, context_size: int) -> MlstmParams:
    base = init_lstm(rng, input_size, hidden)
    wy = rng.uniform(-INIT_RANGE, INIT_RANGE, size=(4 * hidden, context_size))
    return MlstmParams(base.wx, base.wh, base.b, wy)


def _check(x, prev: LstmState, p: LstmParams):
    if x.shape[-1] != p.input_size:
        raise ShapeError(f"input width {x.shape[-1]} != cell input size {p.input_size}")
    if prev.h.shape[-1] != p.hidden_size or prev.c.shape != prev.h.shape:
        raise ShapeError(
            f"state shapes h {prev.h.shape}, c {prev.c.shape} do not match hidden size {p.hidden_size}")


def _gates(z, x, prev: LstmState, y=None):
    h = z.shape[-1] // 4
    f = sigmoid(z[..., :h])
    i = sigmoid(z[..., h:2 * h])
    o = sigmoid(z[..., 2 * h:3 * h])
    g = tanh(z[..., 3 * h:])
    c = f * prev.c + i * g
    tc = tanh(c)
    cache = CellCache(x, prev.h, prev.c, z, f, i, o, g, c, tc, y)
    return LstmState(o * tc, c), cache


def lstm_forward(x, prev: LstmState, p: LstmParams):
    x = np.asarray(x, DTYPE)
    _check(x, prev, p)
    z = x @ p.wx.T + prev.h @ p.wh.T + p.b
    return _gates(z, x, prev)


def mlstm_forward(q, y, prev: LstmState, p: MlstmParams):
    """LSTM step whose every gate also sees the context vector ``y``."""
    q = np.asarray(q, DTYPE)
    y = np.asarray(y, DTYPE)
    _check(q, prev, p)
    if y.shape[-1] != p.context_size:
        raise ShapeError(f"context width {y.shape[-1]} != {p.context_size}")
    z = q @ p.wx.T + prev.h @ p.wh.T + y @ p.wy.T + p.b
    return _gates(z, q, prev, y)


def _gate_backward(dh, dc, cache: CellCache):
    """Gradients w.r.t. the gate pre-activations and the previous cell state."""
    c = cache
    do = dh * c.tanh_c
    dc = dc + dh * c.o * (1.0 - c.tanh_c ** 2)
    df = dc * c.c_prev
    di = dc * c.g
    dg = dc * c.i
    dc_prev = dc * c.f
    dz = np.concatenate([
        df * c.f * (1.0 - c.f),
        di * c.i * (1.0 - c.i),
        do * c.o * (1.0 - c.o),
        dg * (1.0 - c.g ** 2),
    ], axis=-1)
    return dz, dc_prev


def _outer_acc(dz, x):
    # works for a single step (1-D) and for a batch (2-D)
    return np.outer(dz, x) if dz.ndim == 1 else dz.T @ x


def _check_cache(dh, cache: CellCache, p: LstmParams):
    if cache.z.shape[-1] != 4 * p.hidden_size or cache.x.shape[-1] != p.input_size:
        raise ShapeError("cell cache does not match parameters")
    if np.shape(dh) != cache.c.shape:
        raise ShapeError(f"upstream gradient {np.shape(dh)} != state shape {cache.c.shape}")


def lstm_backward(grad_h, grad_c, cache: CellCache, p: LstmParams, grads: Optional[LstmParams] = None):
    """Backward pass of one LSTM step.

    Parameter gradients are added into ``grads`` (allocated when None), so the
    same accumulator can be threaded through every time step of a sequence.
    Returns ``(grads, grad_x, LstmState(grad_h_prev, grad_c_prev))``.
    """
    _check_cache(grad_h, cache, p)
    if grads is None:
        grads = p.zeros_like()
    dz, dc_prev = _gate_backward(grad_h, grad_c, cache)
    grads.wx += _outer_acc(dz, cache.x)
    grads.wh += _outer_acc(dz, cache.h_prev)
    grads.b += dz if dz.ndim == 1 else dz.sum(axis=0)
    return grads, dz @ p.wx, LstmState(dz @ p.wh, dc_prev)


def mlstm_backward(grad_h, grad_c, cache: CellCache, p: MlstmParams, grads: Optional[MlstmParams] = None):
    """As :func:`lstm_backward`; additionally returns the gradient w.r.t. ``y``.

    Returns ``(grads, grad_q, grad_y, LstmState(grad_h_prev, grad_c_prev))``.
    """
    _check_cache(grad_h, cache, p)
    if grads is None:
        grads = p.zeros_like()
    dz, dc_prev = _gate_backward(grad_h, grad_c, cache)
    grads.wx += _outer_acc(dz, cache.x)
    grads.wh += _outer_acc(dz, cache.h_prev)
    grads.wy += _outer_acc(dz, cache.y)
    grads.b += dz if dz.ndim == 1 else dz.sum(axis=0)
    return grads, dz @ p.wx, dz @ p.wy, LstmState(dz @ p.wh, dc_prev)


def embed(token_index, p: EmbeddingParams) -> np.ndarray:
    """Column(s) of W_s; a batch of indices gives one row per index."""
    idx = np.asarray(token_index)
    n = p.W_s.shape[1]
    if not np.issubdtype(idx.dtype, np.integer):
        raise VocabularyError(f"token index must be an integer, got {idx.dtype}")
    if np.any(idx < 0) or np.any(idx >= n):
        raise VocabularyError(f"token index out of range for vocabulary of size {n}: {token_index}")
    return p.W_s[:, idx].T


def embed_backward(token_index, grad_m, grads: EmbeddingParams) -> EmbeddingParams:
    # sparse scatter: only the used columns are touched
    idx = np.atleast_1d(np.asarray(token_index))
    np.add.at(grads.W_s.T, idx, np.atleast_2d(grad_m))
    return grads


def logits(h, p: OutputParams) -> np.ndarray:
    h = np.asarray(h, DTYPE)
    if h.shape[-1] != p.W_f.shape[1]:
        raise ShapeError(f"hidden width {h.shape[-1]} != output projection width {p.W_f.shape[1]}")
    return h @ p.W_f.T + p.b_f


def project_softmax(h, p: OutputParams) -> np.ndarray:
    return softmax(logits(h, p))


def project_backward(grad_logits, h, p: OutputParams, grads: OutputParams):
    """Accumulate output-layer gradients; returns the gradient w.r.t. ``h``."""
    grads.W_f += _outer_acc(grad_logits, h)
    grads.b_f += grad_logits if grad_logits.ndim == 1 else grad_logits.sum(axis=0)
    return grad_logits @ p.W_f


def dropout(x, rate: float, train: bool, rng: Optional[np.random.Generator] = None):
    """Inverted dropout. Returns ``(output, mask)``; ``mask`` is None when
    the call is the identity (eval mode or zero rate)."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    x = np.asarray(x, DTYPE)
    if not train or rate == 0.0:
        return x, None
    if rng is None:
        raise ConfigError("train-mode dropout needs a random generator")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * mask, mask


def dropout_backward(grad, mask):
    return grad if mask is None else grad * mask
