"""Dense float64 primitives used by the cells.

Matrices and vectors are plain ``numpy.ndarray`` objects of dtype float64.
A matrix is 2-D; where a matrix stands for a sequence of feature vectors,
each *column* is one time step (``D x N`` layout).
"""

import numpy as np

from .errors import EmptyInputError, ShapeError

DTYPE = np.float64


def as_matrix(x) -> np.ndarray:
    m = np.asarray(x, dtype=DTYPE)
    if m.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {m.shape}")
    return m


def as_vector(x) -> np.ndarray:
    v = np.asarray(x, dtype=DTYPE)
    if v.ndim != 1:
        raise ShapeError(f"expected a vector, got shape {v.shape}")
    return v


def matmul(a, b) -> np.ndarray:
    """Matrix product with a fixed, row-major accumulation order.

    Every output entry is accumulated as ``((a[i,0]*b[0,j]) + a[i,1]*b[1,j]) + ...``
    so the result is bit-identical to a naive triple loop.
    """
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=DTYPE)
    for k in range(a.shape[1]):
        out += a[:, k:k + 1] * b[k:k + 1, :]
    return out


def sigmoid(x) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def tanh(x) -> np.ndarray:
    return np.tanh(np.asarray(x, dtype=DTYPE))


def softmax(x) -> np.ndarray:
    """Max-shifted softmax over the last axis."""
    x = np.asarray(x, dtype=DTYPE)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(x) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def mean_columns(m) -> np.ndarray:
    """Arithmetic mean of the columns of ``m``.

    Each row is summed in ascending value order, so the result does not depend
    on the order of the columns (bit for bit). Offsets from the row minimum
    are averaged, which makes constant rows come back exactly.
    """
    m = as_matrix(m)
    if m.shape[1] == 0:
        raise EmptyInputError("mean_columns of a matrix with zero columns")
    s = np.ascontiguousarray(np.sort(m, axis=1))
    lo = s[:, 0]
    return lo + (s - lo[:, None]).sum(axis=1) / m.shape[1]
