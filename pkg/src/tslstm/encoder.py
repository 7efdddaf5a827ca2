"""Temporal-pooling encoder.

Frame features ``V`` are a ``(d_v, n_v)`` matrix, one column per frame. The
frames are cut into ``n_e`` contiguous segments, each segment is averaged,
an LSTM runs over the segment means, and the fused context is
``y = [mean of all frames, mean of all LSTM outputs]``.
"""

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import nn
from .errors import ConfigError, EmptyInputError, ShapeError
from .nn import LstmParams, LstmState
from .tensor import DTYPE, as_matrix, mean_columns


def segment_bounds(n_v: int, n_e: int) -> List[tuple]:
    """Half-open frame ranges ``[floor(k*n_v/n_e), floor((k+1)*n_v/n_e))``."""
    if n_e < 1 or n_e > n_v:
        raise ConfigError(f"segment count must satisfy 1 <= n_e <= n_v, got n_e={n_e}, n_v={n_v}")
    cuts = [(k * n_v) // n_e for k in range(n_e + 1)]
    return list(zip(cuts[:-1], cuts[1:]))


def temporal_pool(v, n_e: int) -> np.ndarray:
    """Segment means, shape ``(d_v, n_e)``."""
    v = as_matrix(v)
    bounds = segment_bounds(v.shape[1], n_e)
    return np.stack([mean_columns(v[:, a:b]) for a, b in bounds], axis=1)


def temporal_pool_backward(grad_e, n_v: int) -> np.ndarray:
    """Spread each segment gradient evenly over its member frames."""
    grad_e = as_matrix(grad_e)
    out = np.zeros((grad_e.shape[0], n_v), DTYPE)
    for k, (a, b) in enumerate(segment_bounds(n_v, grad_e.shape[1])):
        out[:, a:b] = grad_e[:, k:k + 1] / (b - a)
    return out


@dataclass
class EncoderCache:
    cells: list           # one CellCache per segment step
    masks: list           # dropout masks on the outputs (None = identity)
    n_e: int


def encode_segments(segments, enc: LstmParams, *, dropout_rate: float = 0.0,
                    train: bool = False, rng: Optional[np.random.Generator] = None):
    """Run the encoder LSTM over segment means.

    ``segments`` is ``(n_e, d_v)`` for one video or ``(batch, n_e, d_v)``.
    Returns the list of (possibly dropped-out) hidden outputs, one per step,
    and the cache for :func:`encode_backward`. The recurrence always uses the
    undropped hidden state.
    """
    segments = np.asarray(segments, DTYPE)
    n_e = segments.shape[-2]
    batch = None if segments.ndim == 2 else segments.shape[0]
    state = LstmState.zeros(enc.hidden_size, batch)
    outputs, cells, masks = [], [], []
    for t in range(n_e):
        state, cache = nn.lstm_forward(segments[..., t, :], state, enc)
        out, mask = nn.dropout(state.h, dropout_rate, train, rng)
        outputs.append(out)
        cells.append(cache)
        masks.append(mask)
    return outputs, EncoderCache(cells, masks, n_e)


def encode(v, n_e: int, enc: LstmParams):
    """Encode one video: returns ``(H, cache)`` with ``H`` the list of the
    ``n_e`` hidden vectors (eval mode)."""
    v = as_matrix(v)
    if v.shape[0] != enc.input_size:
        raise ShapeError(f"feature width {v.shape[0]} != encoder input size {enc.input_size}")
    return encode_segments(temporal_pool(v, n_e).T, enc)


def mean_hidden(h_seq) -> np.ndarray:
    if len(h_seq) == 0:
        raise EmptyInputError("no encoder outputs to average")
    acc = np.zeros_like(h_seq[0])
    for h in h_seq:
        acc = acc + h
    return acc / len(h_seq)


def fuse(v, h_seq) -> np.ndarray:
    """``y = [mean of the frame columns of v, mean of h_seq]``."""
    v = as_matrix(v)
    if v.shape[1] == 0:
        raise EmptyInputError("video has no frames")
    return np.concatenate([mean_columns(v), mean_hidden(h_seq)])


def encode_backward(grad_hbar, cache: EncoderCache, enc: LstmParams, grads: LstmParams):
    """Backpropagate the gradient of the pooled hidden mean through the
    encoder. Accumulates into ``grads`` and returns the gradient w.r.t. the
    segment means, same layout as the ``segments`` input."""
    n_e = cache.n_e
    share = np.asarray(grad_hbar, DTYPE) / n_e
    dh_next = np.zeros_like(share)
    dc_next = np.zeros_like(share)
    d_seg = [None] * n_e
    for t in reversed(range(n_e)):
        dh = nn.dropout_backward(share, cache.masks[t]) + dh_next
        _, dx, dprev = nn.lstm_backward(dh, dc_next, cache.cells[t], enc, grads)
        dh_next, dc_next = dprev.h, dprev.c
        d_seg[t] = dx
    return np.stack(d_seg, axis=-2)
