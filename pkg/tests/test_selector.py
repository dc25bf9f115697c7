import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvselect import ContractError, PagedKvPool
from kvselect.selector import (
    CriticalityScores,
    score_paged,
    select_for_chunk,
    select_head_soft_vote,
    select_head_vote,
    select_topk,
)

from conftest import filled_pool


def scores_of(matrix):
    m = np.asarray(matrix, dtype=np.float64)
    return CriticalityScores(m, np.arange(m.shape[1]))


def adversarial_instance():
    """Two heads, four tokens, one KV head.

    Head A prefers token 1 by a margin of 4. Head B has a large query norm,
    so its logit of 10 on tokens 2 and 3 swamps the raw sum.
    """
    pool = PagedKvPool(4, 1, 3)
    seq = pool.create_sequence()
    keys = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 1, 0]], dtype=np.float32)
    pool.append_kv(seq, keys, np.zeros_like(keys))
    q = np.array([[4.0, 0, 0], [0, 10.0, 0]])
    return pool, seq, q


def test_score_single_head_is_squared_norm():
    pool = PagedKvPool(1, 1, 3)
    seq = pool.create_sequence()
    k = np.array([[1.0, 2.0, 3.0]], dtype=np.float32)
    pool.append_kv(seq, k, k)
    s = score_paged(k, pool, seq)
    assert s.per_head[0, 0] == 14.0


def test_score_matches_gather_matmul_oracle(rng):
    pool, seq, k, _ = filled_pool(rng, 40, num_kv_heads=2, head_dim=8, seed=5)
    q = rng.standard_normal((4, 8))
    cand = np.sort(rng.choice(40, 25, replace=False))
    s = score_paged(q, pool, seq, cand, block_size=7)
    gk, _ = pool.gather(seq, cand)
    oracle = np.empty((4, 25))
    for h in range(4):
        g = h % 2
        oracle[h] = gk[:, g * 8 : (g + 1) * 8].astype(np.float64) @ q[h]
    np.testing.assert_allclose(s.per_head, oracle, rtol=1e-6, atol=1e-9)
    np.testing.assert_array_equal(s.candidate_idx, cand)


def test_score_tiling_bit_identical(rng):
    pool, seq, _, _ = filled_pool(rng, 200, num_kv_heads=2, head_dim=16, seed=1)
    q = rng.standard_normal((4, 16))
    ref = score_paged(q, pool, seq, block_size=200).per_head
    for b in (1, 7, 64):
        assert score_paged(q, pool, seq, block_size=b).per_head.tobytes() == ref.tobytes()


def test_score_head_config_errors(rng):
    pool, seq, _, _ = filled_pool(rng, 4, num_kv_heads=2, head_dim=4)
    with pytest.raises(ContractError):
        score_paged(np.ones((3, 4)), pool, seq)
    with pytest.raises(ContractError):
        score_paged(np.ones((2, 5)), pool, seq)


def test_select_topk_single_head():
    s = scores_of([[0.5, 3.0, -1.0, 2.0]])
    assert select_topk(s, 2).selected.tolist() == [1, 3]


def test_select_topk_duplicate_heads_doubles_criticality():
    one = select_topk(scores_of([[0.5, 3.0, -1.0, 2.0]]), 2)
    two = select_topk(scores_of([[0.5, 3.0, -1.0, 2.0]] * 2), 2)
    assert two.selected.tolist() == one.selected.tolist()
    np.testing.assert_allclose(two.criticality, 2 * one.criticality)


def test_scaled_head_dominates_topk():
    pool, seq, q = adversarial_instance()
    s = score_paged(q, pool, seq)
    assert 1 not in select_topk(s, 2).selected


def test_head_vote_identical_heads_match_topk(rng):
    row = rng.standard_normal(30)
    s = scores_of([row, row, row])
    assert select_head_vote(s, 5).selected.tolist() == select_topk(s, 5).selected.tolist()


def test_head_vote_disjoint_heads():
    # head 0 top-2 = {0, 1}; head 1 top-2 = {4, 5}; every nominee gets one vote
    s = scores_of([[9, 8, 0, 0, 0, 0], [0, 0, 0, 0, 8, 9]])
    votes = select_head_vote(s, 2)
    np.testing.assert_array_equal(votes.criticality, [1, 1, 0, 0, 1, 1])
    assert votes.selected.tolist() == [0, 1]


def test_head_vote_scale_free(rng):
    m = rng.standard_normal((3, 20))
    scaled = m.copy()
    scaled[1] *= 100
    a, b = select_head_vote(scores_of(m), 4), select_head_vote(scores_of(scaled), 4)
    np.testing.assert_array_equal(a.criticality, b.criticality)


def test_soft_vote_single_head_matches_topk(rng):
    s = scores_of([rng.standard_normal(50)])
    assert select_head_soft_vote(s, 7).selected.tolist() == select_topk(s, 7).selected.tolist()


def brute_softmax(row):
    m = max(row)
    e = [math.exp(x - m) for x in row]
    z = sum(e)
    return [x / z for x in e]


def test_soft_vote_adversarial_against_brute_force():
    pool, seq, q = adversarial_instance()
    s = score_paged(q, pool, seq)
    rows = [[float(x) for x in r] for r in s.per_head]
    assert rows == [[0, 4, 0, 0], [0, 0, 10, 10]]
    expected = [a + b for a, b in zip(brute_softmax(rows[0]), brute_softmax(rows[1]))]
    res = select_head_soft_vote(s, 2)
    np.testing.assert_allclose(res.criticality, expected, rtol=1e-12)
    # head B spends under one unit of mass on each of its tokens
    assert max(brute_softmax(rows[1])) < 1
    assert 1 in res.selected.tolist()
    assert res.selected.tolist() == [1, 2]


def test_soft_vote_uniform():
    s = scores_of(np.zeros((3, 8)))
    res = select_head_soft_vote(s, 3)
    np.testing.assert_allclose(res.criticality, 3 / 8)
    assert res.selected.tolist() == [0, 1, 2]


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 60), st.floats(0.01, 1e3), st.integers(0, 2**31))
def test_soft_vote_mass_bounded(h, t, scale, seed):
    m = np.random.default_rng(seed).standard_normal((h, t)) * scale
    res = select_head_soft_vote(scores_of(m), 3)
    assert abs(res.criticality.sum() - h) <= 1e-5 * h


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(2, 40), st.integers(0, 2**31), st.sampled_from(["topk", "head_soft_vote"]))
def test_budget_nesting(h, t, seed, method):
    # head_vote is excluded: its vote counts are recomputed for every budget
    from kvselect.selector import get_selector

    m = np.round(np.random.default_rng(seed).standard_normal((h, t)), 1)
    fn = get_selector(method)
    for k in range(1, t):
        small = set(fn(scores_of(m), k).selected.tolist())
        big = set(fn(scores_of(m), k + 1).selected.tolist())
        assert small <= big


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(1.01, 50))
def test_scaling_one_head_never_changes_votes(seed, alpha):
    r = np.random.default_rng(seed)
    pool, seq, _, _ = filled_pool(r, 30, num_kv_heads=2, head_dim=4)
    q = r.standard_normal((2, 4))
    qs = q.copy()
    qs[1] *= alpha
    a = select_head_vote(score_paged(q, pool, seq), 5).criticality
    b = select_head_vote(score_paged(qs, pool, seq), 5).criticality
    np.testing.assert_array_equal(a, b)
    soft = select_head_soft_vote(score_paged(qs, pool, seq), 5)
    assert abs(soft.criticality.sum() - 2) < 1e-9


def test_select_for_chunk_single_row_and_identical_rows(rng):
    pool, seq, _, _ = filled_pool(rng, 64, num_kv_heads=2, head_dim=8)
    row = rng.standard_normal((1, 32))
    for method in ("topk", "head_vote", "head_soft_vote"):
        direct = select_for_chunk(row, pool, seq, 5, method, num_heads=4)
        s = score_paged(row.reshape(4, 8), pool, seq)
        from kvselect.selector import get_selector

        assert direct.selected.tolist() == get_selector(method)(s, 5).selected.tolist()
        rep = select_for_chunk(np.repeat(row, 9, axis=0), pool, seq, 5, method, num_heads=4)
        assert rep.selected.tolist() == direct.selected.tolist()


def test_select_for_chunk_averages_first(rng):
    pool, seq, _, _ = filled_pool(rng, 300, num_kv_heads=2, head_dim=8, seed=9)
    chunk = rng.standard_normal((512, 32)).astype(np.float32)
    got = select_for_chunk(chunk, pool, seq, 20, "head_soft_vote", num_heads=4, candidates=np.arange(10, 250))
    # oracle: average in float64, score with an explicit loop, soft vote by hand
    mean = chunk.astype(np.float64).sum(axis=0) / 512
    gk, _ = pool.gather(seq, np.arange(10, 250))
    crit = np.zeros(240)
    for h in range(4):
        g = h % 2
        logits = gk[:, g * 8 : (g + 1) * 8].astype(np.float64) @ mean[h * 8 : (h + 1) * 8]
        crit += np.array(brute_softmax(list(logits)))
    order = sorted(range(240), key=lambda j: (-crit[j], j))[:20]
    assert got.selected.tolist() == sorted(10 + j for j in order)


def test_unknown_method(rng):
    pool, seq, _, _ = filled_pool(rng, 4)
    with pytest.raises(ContractError):
        select_for_chunk(np.ones((1, 16)), pool, seq, 2, "bogus", num_heads=2)
