"""Full and selective sparse attention, plus the prefill and decode loops.

Selective attention for a step attends to three windows of the cached
sequence (the first ``n_init`` tokens, ``k`` selected tokens, the most recent
``n_local`` tokens) and to the current tokens under a causal mask.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import numpy as np

from .errors import ContractError
from .kernels import softmax_rows
from .pool import PagedKvPool, SequenceHandle
from .selection_cache import SelectionCacheEntry, lookup_or_select
from .selector import METHODS, SelectionResult, get_selector, kv_head_map, score_paged


@dataclass
class EngineConfig:
    k: int = 2048
    n_local: int = 512
    n_init: int = 128
    chunk_size: int = 512
    theta: float = 0.9
    num_heads: int = 8
    num_kv_heads: int = 8
    head_dim: int = 64
    block_size: int = 1024
    selection_method: str = "head_soft_vote"
    page_size: int = 1

    def __post_init__(self):
        for name in ("k", "n_local", "n_init"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be >= 0")
        for name in ("chunk_size", "num_heads", "num_kv_heads", "head_dim", "block_size", "page_size"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")
        if self.num_heads % self.num_kv_heads:
            raise ContractError("num_heads must be a multiple of num_kv_heads")
        if self.selection_method not in METHODS:
            raise ContractError(f"selection_method must be one of {METHODS}")

    @property
    def q_width(self) -> int:
        return self.num_heads * self.head_dim

    @property
    def kv_width(self) -> int:
        return self.num_kv_heads * self.head_dim

    @classmethod
    def from_dict(cls, data: dict) -> "EngineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ContractError(f"unknown engine config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass
class AttentionWindows:
    forced_init: np.ndarray
    selected: np.ndarray
    forced_local: np.ndarray

    def union(self) -> np.ndarray:
        """Deduplicated, ascending indices to gather (no token attended twice)."""
        return np.union1d(np.union1d(self.forced_init, self.selected), self.forced_local).astype(np.int64)


def candidate_range(cfg: EngineConfig, n_cached: int) -> np.ndarray:
    """Cached tokens eligible for selection: everything outside the forced windows."""
    lo = min(cfg.n_init, n_cached)
    hi = max(lo, n_cached - cfg.n_local)
    return np.arange(lo, hi, dtype=np.int64)


def build_windows(cfg: EngineConfig, n_cached: int, selected=None) -> AttentionWindows:
    sel = np.empty(0, dtype=np.int64) if selected is None else np.asarray(selected, dtype=np.int64)
    return AttentionWindows(
        forced_init=np.arange(min(cfg.n_init, n_cached), dtype=np.int64),
        selected=sel,
        forced_local=np.arange(max(0, n_cached - cfg.n_local), n_cached, dtype=np.int64),
    )


def _split_heads(x: np.ndarray, n_heads: int, head_dim: int) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != n_heads * head_dim:
        raise ContractError(f"expected width {n_heads * head_dim}, got shape {x.shape}")
    return x.reshape(x.shape[0], n_heads, head_dim)


def sdpa_full(
    q: np.ndarray,
    k_all: np.ndarray,
    v_all: np.ndarray,
    num_heads: int,
    num_kv_heads: int,
    head_dim: int,
) -> np.ndarray:
    """Reference scaled dot-product attention over a full cache.

    ``q`` holds the ``C`` current queries; ``k_all``/``v_all`` hold the ``N``
    cached tokens followed by the ``C`` current tokens. Current query ``i``
    sees every cached token and current tokens ``0..i``.
    """
    q = np.asarray(q)
    k_all = np.asarray(k_all)
    v_all = np.asarray(v_all)
    if k_all.shape != v_all.shape:
        raise ContractError(f"K/V shape mismatch: {k_all.shape} vs {v_all.shape}")
    if q.ndim != 2 or q.shape[1] != num_heads * head_dim:
        raise ContractError(f"q must be [C, {num_heads * head_dim}], got {q.shape}")
    if k_all.ndim != 2 or k_all.shape[1] != num_kv_heads * head_dim:
        raise ContractError(f"K must be [N+C, {num_kv_heads * head_dim}], got {k_all.shape}")
    c = q.shape[0]
    n = k_all.shape[0] - c
    if n < 0:
        raise ContractError("K/V must contain at least the current tokens")
    head_map = kv_head_map(num_heads, num_kv_heads)
    scale = 1.0 / math.sqrt(head_dim)
    # future[i, j] is True when key j comes after query i
    future = np.arange(n + c)[None, :] > (n + np.arange(c))[:, None]
    out = np.empty((c, num_heads * head_dim), dtype=np.float64)
    for h in range(num_heads):
        g = head_map[h]
        qh = q[:, h * head_dim : (h + 1) * head_dim].astype(np.float64)
        kh = k_all[:, g * head_dim : (g + 1) * head_dim].astype(np.float64)
        vh = v_all[:, g * head_dim : (g + 1) * head_dim].astype(np.float64)
        logits = (qh @ kh.T) * scale
        logits[future] = -np.inf
        out[:, h * head_dim : (h + 1) * head_dim] = softmax_rows(logits) @ vh
    return out


def _attend(
    q: np.ndarray, keys: np.ndarray, values: np.ndarray, n_ctx: int, num_heads: int
) -> np.ndarray:
    """Vectorised attention over ``n_ctx`` context rows then ``C`` causal rows.

    ``keys``/``values`` are ``[n_ctx + C, H_kv, d]``.
    """
    c, head_dim = q.shape[0], keys.shape[2]
    if num_heads != keys.shape[1]:
        head_map = kv_head_map(num_heads, keys.shape[1])
        keys, values = keys[:, head_map, :], values[:, head_map, :]
    qh = _split_heads(q, num_heads, head_dim).astype(np.float64).transpose(1, 0, 2)
    logits = qh @ keys.astype(np.float64).transpose(1, 2, 0)  # [H, C, M]
    logits *= 1.0 / math.sqrt(head_dim)
    if c > 1:
        cur = logits[:, :, n_ctx:]
        cur[:, np.triu(np.ones((c, c), dtype=bool), 1)] = -np.inf
    weights = softmax_rows(logits)
    out = weights @ values.astype(np.float64).transpose(1, 0, 2)  # [H, C, d]
    return out.transpose(1, 0, 2).reshape(c, num_heads * head_dim)


def sparse_attend(
    q: np.ndarray,
    k_cur: np.ndarray,
    v_cur: np.ndarray,
    pool: PagedKvPool,
    seq: SequenceHandle,
    windows: AttentionWindows,
    num_heads: int,
) -> np.ndarray:
    """Attention restricted to the windowed cache tokens plus the current tokens."""
    ctx = windows.union()
    rows = pool.token_rows(seq, ctx)
    h_kv, d = pool.num_kv_heads, pool.head_dim
    k_cur = _split_heads(k_cur, h_kv, d)
    v_cur = _split_heads(v_cur, h_kv, d)
    if k_cur.shape != v_cur.shape or k_cur.shape[0] != np.asarray(q).shape[0]:
        raise ContractError("current K/V must have one row per query")
    n_ctx = ctx.size
    keys = np.empty((n_ctx + k_cur.shape[0], h_kv, d), dtype=pool.dtype)
    values = np.empty_like(keys)
    np.take(pool.head_view("k"), rows, axis=0, out=keys[:n_ctx])
    np.take(pool.head_view("v"), rows, axis=0, out=values[:n_ctx])
    keys[n_ctx:] = k_cur
    values[n_ctx:] = v_cur
    return _attend(q, keys, values, n_ctx, num_heads)


def _select(cfg: EngineConfig, q_heads: np.ndarray, pool, seq, candidates: np.ndarray, k: int) -> SelectionResult:
    if candidates.size <= k:
        return SelectionResult(candidates.copy(), np.zeros(candidates.size))
    scores = score_paged(q_heads, pool, seq, candidates, cfg.block_size)
    return get_selector(cfg.selection_method)(scores, k)


def prefill(
    q_full: np.ndarray,
    k_full: np.ndarray,
    v_full: np.ndarray,
    cfg: EngineConfig,
    pool: PagedKvPool,
    seq: SequenceHandle,
    trace: list | None = None,
) -> np.ndarray:
    """Chunked prefill: per chunk, select with the chunk's mean query, attend, append.

    Candidates for a chunk are the tokens appended before it, minus the forced
    windows. When ``trace`` is a list, one :class:`AttentionWindows` per chunk
    is appended to it.
    """
    q_full = np.asarray(q_full)
    n_in = q_full.shape[0]
    if n_in < 1:
        raise ContractError("prefill needs at least one token")
    outputs = []
    for s in range(0, n_in, cfg.chunk_size):
        e = min(s + cfg.chunk_size, n_in)
        n_cached = seq.logical_len
        cand = candidate_range(cfg, n_cached)
        selected = None
        if cand.size and cfg.k > 0:
            mean_q = q_full[s:e].astype(np.float64).mean(axis=0)
            selected = _select(cfg, mean_q.reshape(cfg.num_heads, cfg.head_dim), pool, seq, cand, cfg.k).selected
        windows = build_windows(cfg, n_cached, selected)
        if trace is not None:
            trace.append(windows)
        outputs.append(sparse_attend(q_full[s:e], k_full[s:e], v_full[s:e], pool, seq, windows, cfg.num_heads))
        pool.append_kv(seq, k_full[s:e], v_full[s:e])
    return np.concatenate(outputs, axis=0)


def decode_step(
    q_t: np.ndarray,
    k_t: np.ndarray,
    v_t: np.ndarray,
    cfg: EngineConfig,
    pool: PagedKvPool,
    seq: SequenceHandle,
    cache_entry: SelectionCacheEntry,
    trace: list | None = None,
) -> np.ndarray:
    """One autoregressive step; selection goes through the Selection Cache."""
    q_t = np.atleast_2d(np.asarray(q_t))
    if q_t.shape[0] != 1:
        raise ContractError("decode_step takes a single query row")
    n_cached = seq.logical_len
    cand = candidate_range(cfg, n_cached)
    selected = None
    if cand.size and cfg.k > 0:
        q_heads = q_t.reshape(cfg.num_heads, cfg.head_dim)
        result, _ = lookup_or_select(
            q_heads,
            cache_entry,
            cfg.k,
            lambda q, k: _select(cfg, q, pool, seq, cand, k),
        )
        selected = result.selected
    windows = build_windows(cfg, n_cached, selected)
    if trace is not None:
        trace.append(windows)
    out = sparse_attend(q_t, k_t, v_t, pool, seq, windows, cfg.num_heads)
    pool.append_kv(seq, k_t, v_t)
    return out


class ApproxError(NamedTuple):
    absolute: float
    relative: float


def approx_error(o_full: np.ndarray, o_sparse: np.ndarray) -> ApproxError:
    """Frobenius distance between full and sparse outputs, absolute and relative."""
    a = np.asarray(o_full, dtype=np.float64)
    b = np.asarray(o_sparse, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch: {a.shape} vs {b.shape}")
    diff = float(np.linalg.norm(a - b))
    ref = float(np.linalg.norm(a))
    if ref == 0.0:
        rel = 0.0 if diff == 0.0 else math.inf
    else:
        rel = diff / ref
    return ApproxError(diff, rel)


def full_reference(q_full, k_full, v_full, cfg: EngineConfig, chunk_size: int | None = None) -> np.ndarray:
    """Causal full attention over a whole sequence, evaluated chunk by chunk."""
    q_full = np.asarray(q_full)
    step = chunk_size or cfg.chunk_size
    outs = []
    for s in range(0, q_full.shape[0], step):
        e = min(s + step, q_full.shape[0])
        outs.append(sdpa_full(q_full[s:e], k_full[:e], v_full[:e], cfg.num_heads, cfg.num_kv_heads, cfg.head_dim))
    return np.concatenate(outs, axis=0)
