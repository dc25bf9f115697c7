"""Dense numeric primitives.

Storage is float32 by default; every reduction (dot products, softmax sums)
accumulates in float64. Ties are always broken toward the lower index.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError

DEFAULT_DTYPE = np.float32


def _check_finite(name: str, x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise ContractError(f"{name} contains non-finite entries")


def as_matrix(x, dtype=DEFAULT_DTYPE) -> np.ndarray:
    m = np.asarray(x, dtype=dtype)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise ContractError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def as_index_list(idx) -> np.ndarray:
    """Coerce to a strictly ascending int64 index array."""
    arr = np.asarray(idx, dtype=np.int64).reshape(-1)
    if arr.size > 1 and np.any(np.diff(arr) <= 0):
        raise ContractError("index list must be strictly ascending")
    if arr.size and arr[0] < 0:
        raise ContractError(f"negative index {int(arr[0])}")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with float64 accumulation.

    The result is returned in float64; callers decide whether to narrow it.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ContractError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ContractError(f"inner dimensions differ: {a.shape} x {b.shape}")
    _check_finite("a", a)
    _check_finite("b", b)
    return a.astype(np.float64) @ b.astype(np.float64)


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction, computed in float64.

    ``-inf`` entries are allowed (masked positions) as long as every row keeps
    at least one finite entry.
    """
    x = np.asarray(m, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    row_max = x.max(axis=-1, keepdims=True)
    e = np.exp(x - row_max)
    out = e / e.sum(axis=-1, keepdims=True)
    return out[0] if squeeze else out


def topk_indices(scores, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores, returned in ascending order.

    Equal scores are resolved in favour of the smaller index, so the result is
    fully deterministic. Runs in linear time via a partition.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    n = s.size
    if n == 0:
        raise ContractError("topk_indices on empty scores")
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    _check_finite("scores", s)
    if k >= n:
        return np.arange(n, dtype=np.int64)
    kth = np.partition(s, n - k)[n - k]
    above = np.flatnonzero(s > kth)
    ties = np.flatnonzero(s == kth)[: k - above.size]
    return np.sort(np.concatenate([above, ties])).astype(np.int64)


def cosine(u, v) -> float:
    """Cosine similarity in float64, clipped to [-1, 1].

    ``cosine(v, v)`` is exactly 1.0: the norm product is formed as
    ``sqrt(|u|^2 |v|^2)`` from the same dot kernel, and ``sqrt(x*x) == x``
    holds for IEEE doubles.
    """
    a = np.asarray(u, dtype=np.float64).reshape(-1)
    b = np.asarray(v, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ContractError(f"length mismatch: {a.size} vs {b.size}")
    su, sv = float(np.abs(a).max(initial=0.0)), float(np.abs(b).max(initial=0.0))
    if su == 0.0 or sv == 0.0:
        raise ContractError("cosine of a zero-norm vector is undefined")
    # rescale so the squared norms neither underflow nor overflow
    a, b = a / su, b / sv
    nu = float(np.dot(a, a))
    nv = float(np.dot(b, b))
    c = float(np.dot(a, b)) / np.sqrt(nu * nv)
    return float(min(1.0, max(-1.0, c)))


def chunk_mean(q_chunk: np.ndarray) -> np.ndarray:
    """Column-wise mean of a chunk of query rows (float64 accumulation)."""
    q = np.asarray(q_chunk)
    if q.ndim == 1:
        q = q[None, :]
    if q.shape[0] < 1:
        raise ContractError("chunk_mean of an empty chunk")
    return q.astype(np.float64).mean(axis=0)
