"""Similarity-gated reuse of the previous token selection during decode."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ContractError
from .kernels import cosine
from .selector import SelectionResult


@dataclass
class CacheStats:
    lookups: int = 0
    hits: int = 0

    def to_dict(self, theta: float) -> dict:
        return {
            "theta": theta,
            "lookups": self.lookups,
            "hits": self.hits,
            "hit_rate": hit_rate(self) if self.lookups else 0.0,
        }


def hit_rate(stats: CacheStats) -> float:
    if stats.lookups < 1:
        raise ContractError("hit_rate needs at least one lookup")
    return stats.hits / stats.lookups


@dataclass
class SelectionCacheEntry:
    """One cached selection for a single decode stream.

    ``theta`` is normally in [0, 1]; a value above 1 can never be met and
    therefore disables reuse, which is handy as an always-select baseline.
    """

    theta: float = 0.9
    cached_query: np.ndarray | None = None
    cached_result: SelectionResult | None = None
    first_flag: bool = True
    stats: CacheStats = field(default_factory=CacheStats)

    @property
    def cached_indices(self) -> np.ndarray | None:
        return None if self.cached_result is None else self.cached_result.selected


def lookup_or_select(
    q: np.ndarray,
    entry: SelectionCacheEntry,
    k: int,
    selector_fn: Callable[[np.ndarray, int], SelectionResult],
) -> tuple[SelectionResult, bool]:
    """Return the cached selection when ``cos(q, cached_query) >= theta``.

    Otherwise run ``selector_fn(q, k)``, store its result together with the
    flattened query and clear the first-query flag. Returns ``(result, hit)``.
    """
    flat = np.asarray(q, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(flat)):
        raise ContractError("query contains non-finite entries")
    if not np.any(flat):
        raise ContractError("zero query vector: cosine similarity undefined")
    entry.stats.lookups += 1
    if entry.first_flag or cosine(flat, entry.cached_query) < entry.theta:
        result = selector_fn(q, k)
        entry.cached_result = result
        entry.cached_query = flat.copy()
        entry.first_flag = False
        return result, False
    entry.stats.hits += 1
    return entry.cached_result, True
