import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvselect import ContractError, PagedKvPool
from kvselect.lemma import (
    GranularityConfig,
    LemmaInstance,
    RecallWorkload,
    block_select,
    critical_set,
    head_logit_norms,
    lemma_threshold,
    lemma_violations,
    overlap_bin_means,
    overlap_rate,
    random_instance,
    run_lemma_check,
    run_overlap_experiment,
    run_recall_experiment,
    sample_at_cosine,
    topk_set,
)
from kvselect.workload import scattered_recall_workload


def test_threshold_hand_example():
    # scores 3, 1, 0 for k=1: eta = 2, |q1| = 1, max key norm 3
    keys = np.array([[3.0, 0], [1.0, 0], [0.0, 0]])
    inst = LemmaInstance.build([1.0, 0.0], keys, 1)
    assert inst.eta == 2.0 and inst.k_max_norm == 3.0
    assert inst.top.tolist() == [0]
    assert lemma_threshold(inst) == pytest.approx(1 / math.sqrt(1 + (2 / 6) ** 2))


def test_threshold_depends_on_query_norm():
    keys = np.array([[3.0, 0], [1.0, 0], [0.0, 1.0]])
    a = lemma_threshold(LemmaInstance.build([1.0, 0.0], keys, 1))
    b = lemma_threshold(LemmaInstance.build([5.0, 0.0], keys, 1))
    assert a == pytest.approx(b)


def test_tied_boundary_rejected():
    inst = LemmaInstance.build([1.0, 0.0], np.array([[1.0, 0], [1.0, 0], [0, 0]]), 1)
    with pytest.raises(ContractError):
        lemma_threshold(inst)
    with pytest.raises(ContractError):
        LemmaInstance.build([1.0], np.ones((3, 1)), 3)


@settings(max_examples=50, deadline=None)
@given(st.floats(-0.99, 0.99), st.integers(0, 2**31))
def test_sample_at_cosine_exact(cos, seed):
    rng = np.random.default_rng(seed)
    q1 = rng.standard_normal(16)
    q2 = sample_at_cosine(q1, cos, rng)
    got = q1 @ q2 / np.linalg.norm(q1) / np.linalg.norm(q2)
    assert abs(got - cos) < 1e-9


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.booleans())
def test_bound_is_sound(seed, planted):
    rng = np.random.default_rng(seed)
    inst = random_instance(rng, 16, 64, 4, 8.0 if planted else 0.0)
    bound = lemma_threshold(inst)
    for i in range(5):
        direction = inst.keys[inst.boundary[1]] - inst.keys[inst.boundary[0]] if i % 2 else None
        q2 = sample_at_cosine(inst.q1, rng.uniform(bound, 1.0), rng, direction)
        assert np.array_equal(topk_set(q2, inst.keys, inst.k), inst.top)


def test_lemma_check_small_run():
    rep = run_lemma_check(trials=200, d=16, n=64, k=4, seed=1)
    assert lemma_violations(rep) == 0
    assert rep.notes[-1] == "violations: 0 / 200"
    # planted trials open a wide margin so the bound sits well below 1
    planted = rep.series("bound", planted=True)
    assert planted.max() < 0.99


def test_far_rotation_changes_topk():
    # the property above is not vacuous: an orthogonal q2 does lose the set
    rng = np.random.default_rng(0)
    inst = random_instance(rng, 16, 64, 4, 8.0)
    q2 = sample_at_cosine(inst.q1, 0.0, rng)
    assert not np.array_equal(topk_set(q2, inst.keys, inst.k), inst.top)


def test_overlap_rate_asymmetric():
    assert overlap_rate([1, 2, 3, 4], [3, 4]) == 1.0
    assert overlap_rate([3, 4], [1, 2, 3, 4]) == 0.5
    with pytest.raises(ContractError):
        overlap_rate([1], [])


def test_overlap_pinned_cosine_one_is_full():
    rep = run_overlap_experiment(num_pairs=20, d=8, n=64, k=4, similarity_bins=[(1.0, 1.0)], seed=0)
    assert np.all(rep.series("overlap") == 1.0)


def test_overlap_increases_with_similarity():
    means = overlap_bin_means(run_overlap_experiment(num_pairs=1000, n=512, k=32, seed=3))
    lows, highs = means[(0.0, 0.1)], means[(0.9, 1.0)]
    assert highs > lows
    assert len(means) == 10


def test_critical_set_examples():
    assert critical_set(np.array([0.5, 0.3, 0.2]), 0.5).tolist() == [0]
    assert critical_set(np.array([0.5, 0.3, 0.2]), 0.7).tolist() == [0, 1]
    assert critical_set(np.array([0.25] * 4), 0.9).tolist() == [0, 1, 2, 3]


def test_block_select_covers_best_blocks():
    crit = np.zeros(20)
    crit[13] = 1.0
    assert block_select(crit, 4, 4).tolist() == [12, 13, 14, 15]
    assert block_select(crit, 1, 2).tolist() == [0, 13]
    # ragged tail block is clipped to the sequence
    crit[19] = 5.0
    assert block_select(crit, 8, 8).tolist() == [16, 17, 18, 19]


def test_granularity_config_validation():
    with pytest.raises(ContractError):
        GranularityConfig(budget=64)
    with pytest.raises(ContractError):
        GranularityConfig(block_score="median")


def test_recall_token_level_beats_blocks():
    w = scattered_recall_workload(n_tokens=4096, n_needles=24, seed=0)
    rep = run_recall_experiment(GranularityConfig(budget=256), RecallWorkload(w.query, w.keys, w.planted, 0))
    r = rep.series("recall")
    assert r[0] == 1.0
    assert all(a >= b for a, b in zip(r, r[1:]))
    assert r[0] > r[-1]


def test_head_logit_norms():
    pool = PagedKvPool(3, 1, 2)
    seq = pool.create_sequence()
    k = np.array([[1.0, 0], [0, 1.0], [-1.0, -1.0]], dtype=np.float32)
    pool.append_kv(seq, k, k)
    assert head_logit_norms(np.array([[2.0, 3.0]]), pool, seq).tolist() == [2 + 3 + 5]
    with pytest.raises(ContractError):
        empty = PagedKvPool(1, 1, 2)
        head_logit_norms(np.ones((1, 2)), empty, empty.create_sequence())
