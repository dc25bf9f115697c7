"""Checks of the top-k invariance bound and the selection-behaviour experiments.

* The invariance bound: if the margin between the k-th and (k+1)-th key
  score for ``q1`` is ``eta``, any ``q2`` whose cosine to ``q1`` is at least
  ``1 / sqrt(1 + (eta_hat / (2 * kmax))**2)`` picks the same top-k keys, with
  ``eta_hat = eta / |q1|`` and ``kmax`` the largest key norm.
* Overlap of consecutive selections as a function of query similarity.
* Recall of critical tokens under token-level vs block-level selection.
* Per-head L1 norm of attention logits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .kernels import softmax_rows, topk_indices
from .pool import PagedKvPool, SequenceHandle
from .report import ExperimentReport
from .selector import score_paged


def topk_set(q: np.ndarray, keys: np.ndarray, k: int) -> np.ndarray:
    return topk_indices(np.asarray(keys, dtype=np.float64) @ np.asarray(q, dtype=np.float64), k)


@dataclass
class LemmaInstance:
    q1: np.ndarray
    keys: np.ndarray
    k: int
    eta: float
    k_max_norm: float
    top: np.ndarray = field(repr=False)
    # the lowest-scoring selected key and the best unselected key
    boundary: tuple[int, int] = (0, 0)

    @classmethod
    def build(cls, q1, keys, k: int) -> "LemmaInstance":
        q1 = np.asarray(q1, dtype=np.float64)
        keys = np.asarray(keys, dtype=np.float64)
        n = keys.shape[0]
        if not 1 <= k < n:
            raise ContractError(f"need 1 <= k < N, got k={k}, N={n}")
        s = keys @ q1
        order = np.argsort(-s, kind="stable")
        last_in, first_out = int(order[k - 1]), int(order[k])
        eta = float(s[last_in] - s[first_out])
        return cls(
            q1=q1,
            keys=keys,
            k=k,
            eta=eta,
            k_max_norm=float(np.linalg.norm(keys, axis=1).max()),
            top=np.sort(order[:k]).astype(np.int64),
            boundary=(last_in, first_out),
        )


def lemma_threshold(inst: LemmaInstance) -> float:
    """Cosine similarity above which ``q2`` provably keeps ``q1``'s top-k set."""
    if inst.eta <= 0:
        raise ContractError("top-k boundary is tied (eta <= 0); the top-k set is not unique")
    qn = float(np.linalg.norm(inst.q1))
    if qn == 0:
        raise ContractError("q1 has zero norm")
    r = (inst.eta / qn) / (2.0 * inst.k_max_norm)
    return 1.0 / math.sqrt(1.0 + r * r)


def sample_at_cosine(q1: np.ndarray, cos: float, rng: np.random.Generator, direction=None) -> np.ndarray:
    """A vector with cosine exactly ``cos`` to ``q1`` (up to rounding) and random positive scale.

    ``direction`` fixes the orthogonal component; otherwise it is random.
    """
    q1 = np.asarray(q1, dtype=np.float64)
    u = q1 / np.linalg.norm(q1)
    p = rng.standard_normal(u.size) if direction is None else np.asarray(direction, dtype=np.float64)
    p = p - (p @ u) * u
    pn = np.linalg.norm(p)
    if pn == 0:
        p = rng.standard_normal(u.size)
        p = p - (p @ u) * u
        pn = np.linalg.norm(p)
    p /= pn
    sin = math.sqrt(max(0.0, 1.0 - cos * cos))
    return (cos * u + sin * p) * rng.uniform(0.5, 2.0)


def adversarial_direction(inst: LemmaInstance) -> np.ndarray:
    """Rotation direction that most quickly swaps the two boundary keys."""
    last_in, first_out = inst.boundary
    return inst.keys[first_out] - inst.keys[last_in]


def probe_instance(inst: LemmaInstance, n_probes: int, rng: np.random.Generator) -> int:
    """Count q2 samples above the bound whose top-k differs from q1's (should be 0)."""
    bound = lemma_threshold(inst)
    adv = adversarial_direction(inst)
    violations = 0
    for i in range(n_probes):
        cos = rng.uniform(bound, 1.0)
        q2 = sample_at_cosine(inst.q1, cos, rng, adv if i % 2 else None)
        if not np.array_equal(topk_set(q2, inst.keys, inst.k), inst.top):
            violations += 1
    return violations


def random_instance(rng: np.random.Generator, d: int, n: int, k: int, planted_margin: float = 0.0) -> LemmaInstance:
    """Gaussian query and keys; ``planted_margin > 0`` lifts a random k-subset of
    keys along the query to open up a wide top-k gap."""
    q1 = rng.standard_normal(d)
    keys = rng.standard_normal((n, d))
    if planted_margin > 0:
        lifted = rng.choice(n, size=k, replace=False)
        keys[lifted] += planted_margin * q1 / np.linalg.norm(q1)
    return LemmaInstance.build(q1, keys, k)


def run_lemma_check(
    trials: int = 10_000,
    d: int = 64,
    n: int = 256,
    k: int = 16,
    seed: int = 0,
    planted_margin: float = 12.0,
) -> ExperimentReport:
    """Randomised soundness check of the invariance bound.

    Even trials use plain Gaussian keys (tiny margins, bound close to 1); odd
    trials plant a wide margin so the bound sits well below 1. Each trial
    draws one q2 above the bound (random or adversarial rotation) and one
    below it. Only the above-bound outcome can count as a violation.
    """
    config = {"trials": trials, "d": d, "n": n, "k": k, "planted_margin": planted_margin}
    report = ExperimentReport(
        "lemma_check", config, seed, metrics=("bound", "identical_above", "identical_below")
    )
    rng = np.random.default_rng(seed)
    violations = 0
    for t in range(trials):
        planted = planted_margin if t % 2 else 0.0
        inst = random_instance(rng, d, n, k, planted)
        bound = lemma_threshold(inst)
        adversarial = (t // 2) % 2 == 1
        direction = adversarial_direction(inst) if adversarial else None
        cos_above = rng.uniform(bound, 1.0)
        q2 = sample_at_cosine(inst.q1, cos_above, rng, direction)
        same_above = bool(np.array_equal(topk_set(q2, inst.keys, inst.k), inst.top))
        violations += not same_above
        cos_below = rng.uniform(max(0.0, 2 * bound - 1), bound)
        q3 = sample_at_cosine(inst.q1, cos_below, rng, direction)
        same_below = bool(np.array_equal(topk_set(q3, inst.keys, inst.k), inst.top))
        report.add(
            trial=t,
            planted=planted > 0,
            adversarial=adversarial,
            eta=inst.eta,
            bound=bound,
            cos_above=cos_above,
            identical_above=float(same_above),
            cos_below=cos_below,
            identical_below=float(same_below),
        )
    report.notes.append(f"violations: {violations} / {trials}")
    return report


def lemma_violations(report: ExperimentReport) -> int:
    return int((report.series("identical_above") == 0).sum())


def overlap_rate(i1, i2) -> float:
    """|i1 & i2| / |i2|; deliberately asymmetric."""
    a = np.asarray(i1, dtype=np.int64).reshape(-1)
    b = np.asarray(i2, dtype=np.int64).reshape(-1)
    if b.size == 0:
        raise ContractError("overlap_rate: the second index set is empty")
    return np.intersect1d(a, b).size / np.unique(b).size


DEFAULT_BINS = tuple((i / 10, (i + 1) / 10) for i in range(10))


def run_overlap_experiment(
    num_pairs: int = 1000,
    d: int = 64,
    n: int = 1024,
    k: int = 64,
    similarity_bins=DEFAULT_BINS,
    seed: int = 0,
) -> ExperimentReport:
    """Top-k overlap between query pairs generated at controlled cosine similarity.

    Pairs are split evenly across ``similarity_bins`` (``(lo, hi)`` ranges;
    ``lo == hi`` pins the cosine exactly). For each pair the second query is
    ``cos * q1_hat + sin * r`` with ``r`` a random unit direction orthogonal
    to ``q1``. Keys are shared by all pairs of a run.
    """
    bins = [tuple(map(float, b)) for b in similarity_bins]
    if num_pairs < 1 or d < 1 or n < 1 or k < 1 or not bins:
        raise ContractError("overlap experiment parameters must be positive")
    config = {"num_pairs": num_pairs, "d": d, "n": n, "k": k, "bins": bins}
    report = ExperimentReport("overlap", config, seed, metrics=("overlap",))
    rng = np.random.default_rng(seed)
    keys = rng.standard_normal((n, d))
    for p in range(num_pairs):
        lo, hi = bins[p % len(bins)]
        cos = lo if hi <= lo else rng.uniform(lo, hi)
        q1 = rng.standard_normal(d)
        q2 = sample_at_cosine(q1, cos, rng) if cos < 1.0 else q1.copy()
        i1 = topk_set(q1, keys, k)
        i2 = topk_set(q2, keys, k)
        report.add(pair=p, bin_lo=lo, bin_hi=hi, cosine=cos, overlap=overlap_rate(i1, i2))
    return report


def overlap_bin_means(report: ExperimentReport) -> dict[tuple[float, float], float]:
    out: dict[tuple[float, float], list[float]] = {}
    for r in report.rows:
        out.setdefault((r["bin_lo"], r["bin_hi"]), []).append(r["overlap"])
    return {b: float(np.mean(v)) for b, v in out.items()}


@dataclass
class GranularityConfig:
    budget: int = 1024
    block_sizes: tuple[int, ...] = (1, 8, 32, 128)
    block_score: str = "mean"
    critical_mass: float = 0.9

    def __post_init__(self):
        if self.block_score not in ("mean", "max", "sum"):
            raise ContractError(f"block_score must be mean, max or sum, not {self.block_score!r}")
        if not self.block_sizes or min(self.block_sizes) < 1:
            raise ContractError("block sizes must be >= 1")
        if self.budget < max(self.block_sizes):
            raise ContractError(
                f"budget {self.budget} is smaller than the largest block size {max(self.block_sizes)}"
            )


@dataclass
class RecallWorkload:
    """Single-head probe: one query against ``N`` keys."""

    query: np.ndarray
    keys: np.ndarray
    planted: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    seed: int | None = None

    def criticality(self) -> np.ndarray:
        d = self.keys.shape[1]
        logits = (np.asarray(self.keys, np.float64) @ np.asarray(self.query, np.float64)) / math.sqrt(d)
        return softmax_rows(logits)


def critical_set(probs: np.ndarray, mass: float = 0.9) -> np.ndarray:
    """Smallest token set whose attention mass reaches ``mass`` (ties to lower index)."""
    p = np.asarray(probs, dtype=np.float64)
    order = np.lexsort((np.arange(p.size), -p))
    cum = np.cumsum(p[order])
    n = int(np.searchsorted(cum, mass * cum[-1], side="left")) + 1
    return np.sort(order[: min(n, p.size)]).astype(np.int64)


def block_select(crit: np.ndarray, block: int, budget: int, rule: str = "mean") -> np.ndarray:
    """Tokens covered by the ``budget // block`` best contiguous blocks."""
    crit = np.asarray(crit, dtype=np.float64)
    n = crit.size
    n_blocks = -(-n // block)
    padded = np.full(n_blocks * block, np.nan)
    padded[:n] = crit
    grid = padded.reshape(n_blocks, block)
    if rule == "mean":
        score = np.nanmean(grid, axis=1)
    elif rule == "max":
        score = np.nanmax(grid, axis=1)
    else:
        score = np.nansum(grid, axis=1)
    chosen = topk_indices(score, max(1, budget // block))
    tokens = (chosen[:, None] * block + np.arange(block)[None, :]).reshape(-1)
    return tokens[tokens < n]


def run_recall_experiment(cfg: GranularityConfig, workload: RecallWorkload) -> ExperimentReport:
    """Recall of the critical-token set for each selection block size (1 = token level)."""
    crit = workload.criticality()
    critical = critical_set(crit, cfg.critical_mass)
    config = {
        "budget": cfg.budget,
        "block_sizes": list(cfg.block_sizes),
        "block_score": cfg.block_score,
        "critical_mass": cfg.critical_mass,
        "n_tokens": int(crit.size),
    }
    seed = -1 if workload.seed is None else int(workload.seed)
    report = ExperimentReport("recall", config, seed, metrics=("recall",))
    report.notes.append(
        f"critical tokens = smallest set holding >= {cfg.critical_mass:.0%} of the probe's softmax mass"
    )
    for b in cfg.block_sizes:
        chosen = block_select(crit, b, cfg.budget, cfg.block_score)
        hit = np.intersect1d(chosen, critical).size
        report.add(block_size=b, n_critical=int(critical.size), n_selected=int(chosen.size), recall=hit / critical.size)
    return report


def head_logit_norms(q: np.ndarray, pool: PagedKvPool, seq: SequenceHandle) -> np.ndarray:
    """Per-head L1 norm of the logits of ``q`` against every cached token."""
    if seq.logical_len == 0:
        raise ContractError("head_logit_norms on an empty cache")
    scores = score_paged(q, pool, seq, block_size=max(1, seq.logical_len))
    return np.abs(scores.per_head).sum(axis=1)

