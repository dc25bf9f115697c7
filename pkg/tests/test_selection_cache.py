import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvselect import ContractError, SelectionCacheEntry, hit_rate, lookup_or_select
from kvselect.selection_cache import CacheStats
from kvselect.selector import SelectionResult


class CountingSelector:
    def __init__(self):
        self.calls = 0

    def __call__(self, q, k):
        self.calls += 1
        return SelectionResult(np.arange(self.calls, self.calls + k), np.zeros(k))


def test_first_lookup_misses_even_at_theta_zero():
    entry = SelectionCacheEntry(theta=0.0)
    sel = CountingSelector()
    _, hit = lookup_or_select(np.ones(4), entry, 2, sel)
    assert not hit and sel.calls == 1 and not entry.first_flag


def test_hit_returns_cached_without_calling():
    entry = SelectionCacheEntry(theta=0.9)
    sel = CountingSelector()
    first, _ = lookup_or_select(np.array([1.0, 0, 0]), entry, 2, sel)
    again, hit = lookup_or_select(np.array([2.0, 0.1, 0]), entry, 2, sel)
    assert hit and again is first and sel.calls == 1


def test_miss_refreshes_cached_query():
    entry = SelectionCacheEntry(theta=0.9)
    sel = CountingSelector()
    lookup_or_select(np.array([1.0, 0]), entry, 1, sel)
    _, hit = lookup_or_select(np.array([0.0, 1.0]), entry, 1, sel)
    assert not hit
    np.testing.assert_array_equal(entry.cached_query, [0.0, 1.0])
    _, hit = lookup_or_select(np.array([0.0, 3.0]), entry, 1, sel)
    assert hit


def test_theta_one_hits_only_parallel_queries():
    entry = SelectionCacheEntry(theta=1.0)
    sel = CountingSelector()
    q = np.array([0.3, -1.7, 2.2])
    lookup_or_select(q, entry, 1, sel)
    assert lookup_or_select(q, entry, 1, sel)[1]
    # a power-of-two scale keeps the vector exactly parallel in floating point
    assert lookup_or_select(q * 4, entry, 1, sel)[1]


def test_theta_above_one_always_selects():
    entry = SelectionCacheEntry(theta=float("inf"))
    sel = CountingSelector()
    for _ in range(5):
        lookup_or_select(np.ones(3), entry, 1, sel)
    assert sel.calls == 5 and entry.stats.hits == 0


def test_multihead_query_is_flattened():
    entry = SelectionCacheEntry(theta=0.99)
    sel = CountingSelector()
    q = np.arange(1.0, 9.0).reshape(2, 4)
    lookup_or_select(q, entry, 1, sel)
    assert entry.cached_query.shape == (8,)
    assert lookup_or_select(q.reshape(-1), entry, 1, sel)[1]


@pytest.mark.parametrize("bad", [np.zeros(3), np.array([1.0, np.nan, 0])])
def test_rejects_bad_queries(bad):
    with pytest.raises(ContractError):
        lookup_or_select(bad, SelectionCacheEntry(), 1, CountingSelector())


def test_hit_rate_requires_lookups():
    with pytest.raises(ContractError):
        hit_rate(CacheStats())
    assert hit_rate(CacheStats(4, 3)) == 0.75
    assert CacheStats().to_dict(0.5)["hit_rate"] == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 50), st.integers(0, 2**31))
def test_identical_stream_rate(n, seed):
    q = np.random.default_rng(seed).standard_normal(6) + 0.1
    entry = SelectionCacheEntry(theta=1.0)
    for _ in range(n):
        lookup_or_select(q, entry, 1, CountingSelector())
    assert hit_rate(entry.stats) == (n - 1) / n


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_stream_misses_subset_as_theta_increases(seed):
    from kvselect.workload import query_stream

    stream = query_stream(30, 8, np.random.default_rng(seed))
    rates = []
    for theta in (0.5, 0.8, 0.9, 0.95, 1.0):
        entry = SelectionCacheEntry(theta=theta)
        for q in stream:
            lookup_or_select(q, entry, 1, CountingSelector())
        rates.append(hit_rate(entry.stats))
    assert all(a >= b for a, b in zip(rates, rates[1:]))
