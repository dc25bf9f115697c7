"""Token criticality scoring over the paged pool and the selection functions.

Scoring follows a blocked traversal: candidate tokens are visited in blocks of
``block_size``, and each block's keys are read straight from their page frames
(no contiguous copy of the whole cache). Query head ``h`` reads KV head
``h % num_kv_heads``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import ContractError
from .kernels import as_index_list, chunk_mean, softmax_rows, topk_indices
from .pool import PagedKvPool, SequenceHandle

Method = Literal["topk", "head_vote", "head_soft_vote"]
METHODS: tuple[str, ...] = ("topk", "head_vote", "head_soft_vote")


@dataclass
class CriticalityScores:
    per_head: np.ndarray  # [H, T] float64 dot products
    candidate_idx: np.ndarray  # [T] logical token indices

    @property
    def num_heads(self) -> int:
        return self.per_head.shape[0]


@dataclass
class SelectionResult:
    selected: np.ndarray  # ascending logical indices
    criticality: np.ndarray  # aggregated score per candidate (aligned with candidate_idx)

    def __len__(self) -> int:
        return int(self.selected.size)


def kv_head_map(num_heads: int, num_kv_heads: int) -> np.ndarray:
    if num_kv_heads < 1 or num_heads < 1 or num_heads % num_kv_heads:
        raise ContractError(
            f"num_heads ({num_heads}) must be a positive multiple of num_kv_heads ({num_kv_heads})"
        )
    return np.arange(num_heads) % num_kv_heads


def _block_keys(slab: np.ndarray, rows: np.ndarray) -> np.ndarray:
    # a physically contiguous run of frames is read as a view, anything else is gathered
    n = rows.size
    if n and rows[-1] - rows[0] == n - 1 and (n < 3 or np.all(np.diff(rows) == 1)):
        return slab[rows[0] : rows[0] + n]
    return np.take(slab, rows, axis=0)


def score_paged(
    q: np.ndarray,
    pool: PagedKvPool,
    seq: SequenceHandle,
    candidates=None,
    block_size: int = 64,
) -> CriticalityScores:
    """Per-head dot products between ``q`` ``[H, d]`` and candidate keys.

    The result is bit-identical for every ``block_size`` and every physical
    frame layout: each score is one float64 reduction over ``d`` that does not
    depend on its neighbours.
    """
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 2 or q.shape[1] != pool.head_dim:
        raise ContractError(f"query must be [H, {pool.head_dim}], got {q.shape}")
    head_map = kv_head_map(q.shape[0], pool.num_kv_heads)
    if block_size < 1:
        raise ContractError(f"block_size must be >= 1, got {block_size}")
    if candidates is None:
        cand = np.arange(seq.logical_len, dtype=np.int64)
    else:
        cand = as_index_list(candidates)
    num_heads, t_total = q.shape[0], cand.size
    scores = np.empty((num_heads, t_total), dtype=np.float64)
    grouped = num_heads != pool.num_kv_heads
    # resolve the page table once; each block then reads its keys in place
    rows = pool.token_rows(seq, cand)
    slab = pool.head_view("k")
    for t0 in range(0, t_total, block_size):
        keys = _block_keys(slab, rows[t0 : t0 + block_size])
        if grouped:
            keys = keys[:, head_map, :]
        scores[:, t0 : t0 + keys.shape[0]] = np.einsum("lhd,hd->hl", keys, q, dtype=np.float64)
    return CriticalityScores(per_head=scores, candidate_idx=cand)


def _finish(scores: CriticalityScores, criticality: np.ndarray, k: int) -> SelectionResult:
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    if scores.candidate_idx.size == 0:
        return SelectionResult(np.empty(0, dtype=np.int64), criticality)
    picked = topk_indices(criticality, k)
    # candidate_idx is ascending, so the mapped indices stay ascending
    return SelectionResult(scores.candidate_idx[picked], criticality)


def select_topk(scores: CriticalityScores, k: int) -> SelectionResult:
    """Top-k by the sum of raw per-head logits."""
    return _finish(scores, scores.per_head.sum(axis=0), k)


def select_head_vote(scores: CriticalityScores, k: int) -> SelectionResult:
    """Each head nominates its own top-k; tokens ranked by vote count."""
    votes = np.zeros(scores.candidate_idx.size, dtype=np.float64)
    if votes.size:
        for row in scores.per_head:
            votes[topk_indices(row, k)] += 1.0
    return _finish(scores, votes, k)


def select_head_soft_vote(scores: CriticalityScores, k: int) -> SelectionResult:
    """Per-head softmax over candidates, summed across heads, then top-k.

    Every head contributes exactly unit mass, so no single head with large
    logits can dominate the ranking.
    """
    if scores.candidate_idx.size == 0:
        return _finish(scores, np.zeros(0), k)
    return _finish(scores, softmax_rows(scores.per_head).sum(axis=0), k)


SELECTORS = {
    "topk": select_topk,
    "head_vote": select_head_vote,
    "head_soft_vote": select_head_soft_vote,
}


def get_selector(method: str):
    try:
        return SELECTORS[method]
    except KeyError:
        raise ContractError(f"unknown selection method {method!r}; expected one of {METHODS}") from None


def select_for_chunk(
    q_chunk: np.ndarray,
    pool: PagedKvPool,
    seq: SequenceHandle,
    k: int,
    method: str = "head_soft_vote",
    *,
    num_heads: int,
    candidates=None,
    block_size: int = 64,
) -> SelectionResult:
    """Select tokens for a whole chunk of queries using their mean query.

    ``q_chunk`` is ``[c, num_heads * head_dim]``; rows are averaged before
    scoring, so a chunk costs one selection regardless of ``c``.
    """
    selector = get_selector(method)
    mean_q = chunk_mean(q_chunk)
    if mean_q.size != num_heads * pool.head_dim:
        raise ContractError(
            f"query width {mean_q.size} != num_heads*head_dim = {num_heads * pool.head_dim}"
        )
    scores = score_paged(mean_q.reshape(num_heads, pool.head_dim), pool, seq, candidates, block_size)
    return selector(scores, k)
