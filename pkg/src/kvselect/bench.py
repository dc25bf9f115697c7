"""Experiment drivers behind the CLI: timing, budget sweeps, cache replays."""

from __future__ import annotations

import contextlib
import os
import platform
import time
from dataclasses import dataclass, replace

import numpy as np
import psutil
from threadpoolctl import threadpool_limits

from .engine import (
    EngineConfig,
    approx_error,
    build_windows,
    candidate_range,
    decode_step,
    full_reference,
    prefill,
    sdpa_full,
    sparse_attend,
)
from .errors import ContractError
from .kernels import softmax_rows
from .pool import PagedKvPool
from .report import ExperimentReport
from .selection_cache import SelectionCacheEntry
from .selector import get_selector, score_paged
from .workload import WorkloadSpec, generate_workload, query_stream, spread_needles


@dataclass
class TimingRecord:
    variant: str
    n: int
    k: int
    wall_ns: int
    repeats: int


def time_ns(fn, repeats: int = 5, warmup: int = 2) -> list[int]:
    """Wall times of ``fn()`` in ns on the monotonic clock, after ``warmup`` calls."""
    if repeats < 1:
        raise ContractError("repeats must be >= 1")
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - t0)
    return samples


@contextlib.contextmanager
def single_threaded():
    with threadpool_limits(limits=1):
        yield


def hardware_info() -> dict:
    return {
        "machine": platform.machine(),
        "processor": platform.processor() or "unknown",
        "platform": platform.platform(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "cpu_count": os.cpu_count(),
        "memory_total_gb": round(psutil.virtual_memory().total / 2**30, 2),
    }


def _decode_bytes(n: int, cfg: EngineConfig) -> int:
    # two pools of K/V + dense K/V shadows (float32) + float64 per-head temporaries
    dense = 6 * n * cfg.kv_width * 4
    temps = 4 * n * cfg.head_dim * 8 + 2 * n * cfg.num_heads * 8
    return dense + temps


class DecodeBench:
    """One decode step over ``n`` cached tokens, set up once and timed repeatedly."""

    def __init__(self, cfg: EngineConfig, n: int, seed: int, shuffled_layout: bool = True):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.k_cache = rng.standard_normal((n, cfg.kv_width), dtype=np.float32)
        self.v_cache = rng.standard_normal((n, cfg.kv_width), dtype=np.float32)
        self.q = rng.standard_normal((1, cfg.q_width), dtype=np.float32)
        self.k_t = rng.standard_normal((1, cfg.kv_width), dtype=np.float32)
        self.v_t = rng.standard_normal((1, cfg.kv_width), dtype=np.float32)
        self.pool = PagedKvPool.for_tokens(n, cfg.num_kv_heads, cfg.head_dim, cfg.page_size)
        self.seq = self.pool.create_sequence()
        self.pool.append_kv(self.seq, self.k_cache, self.v_cache)
        # same tokens, frames handed out in a random order
        self.shuffled_pool = PagedKvPool.for_tokens(n, cfg.num_kv_heads, cfg.head_dim, cfg.page_size, seed=seed + 1)
        self.shuffled_seq = self.shuffled_pool.create_sequence()
        self.shuffled_pool.append_kv(self.shuffled_seq, self.k_cache, self.v_cache)
        self.k_all = np.concatenate([self.k_cache, self.k_t])
        self.v_all = np.concatenate([self.v_cache, self.v_t])
        self.cand = candidate_range(cfg, n)
        self.selector = get_selector(cfg.selection_method)
        self.cached_selection = self.select()

    def full_sdpa(self) -> np.ndarray:
        c = self.cfg
        return sdpa_full(self.q, self.k_all, self.v_all, c.num_heads, c.num_kv_heads, c.head_dim)

    def full_fused(self) -> np.ndarray:
        """All-heads full attention in one pass; a fairer yardstick than the oracle."""
        c = self.cfg
        keys = self.k_all.reshape(-1, c.num_kv_heads, c.head_dim)
        values = self.v_all.reshape(-1, c.num_kv_heads, c.head_dim)
        if c.num_heads != c.num_kv_heads:
            head_map = np.arange(c.num_heads) % c.num_kv_heads
            keys, values = keys[:, head_map], values[:, head_map]
        q = self.q.reshape(c.num_heads, c.head_dim)
        logits = np.einsum("mhd,hd->hm", keys, q, dtype=np.float64) / np.sqrt(c.head_dim)
        weights = softmax_rows(logits)
        return np.einsum("hm,mhd->hd", weights, values, dtype=np.float64).reshape(1, -1)

    def select(self, pool=None, seq=None) -> np.ndarray:
        c = self.cfg
        pool, seq = pool or self.pool, seq or self.seq
        scores = score_paged(self.q.reshape(c.num_heads, c.head_dim), pool, seq, self.cand, c.block_size)
        return self.selector(scores, c.k).selected

    def attend(self, selected, pool=None, seq=None) -> np.ndarray:
        pool, seq = pool or self.pool, seq or self.seq
        windows = build_windows(self.cfg, seq.logical_len, selected)
        return sparse_attend(self.q, self.k_t, self.v_t, pool, seq, windows, self.cfg.num_heads)

    def selective(self) -> np.ndarray:
        return self.attend(self.select())

    def selective_shuffled(self) -> np.ndarray:
        pool, seq = self.shuffled_pool, self.shuffled_seq
        return self.attend(self.select(pool, seq), pool, seq)

    def selective_cache_hit(self) -> np.ndarray:
        return self.attend(self.cached_selection)


def bench_attn(
    cfg: EngineConfig,
    n_values=(4096, 16384, 65536),
    repeats: int = 5,
    warmup: int = 2,
    seed: int = 0,
    include_cache_hit: bool = True,
    memory_fraction: float = 0.6,
) -> tuple[ExperimentReport, list[TimingRecord]]:
    """Median decode-step time of full SDPA vs selection + sparse attention.

    ``selective`` reads a pool whose frames were allocated in order,
    ``selective_shuffled`` one with randomly placed frames, and
    ``selective_cache_hit`` skips selection as on a Selection Cache hit.
    ``full_fused`` is a one-pass full attention reported for context; the
    headline speedup is against the ``full_sdpa`` reference. Timing runs
    single-threaded. Rows whose working set would not fit in
    ``memory_fraction`` of available memory are skipped with a reason.
    """
    config = {"engine": cfg.to_dict(), "n_values": list(n_values), "repeats": repeats, "warmup": warmup}
    report = ExperimentReport("bench_attn", config, seed, metrics=("wall_ns", "speedup"), deterministic=False)
    report.notes.append("timing rows are not deterministic; hardware: " + str(hardware_info()))
    records: list[TimingRecord] = []
    variants = ["full_sdpa", "full_fused", "selective", "selective_shuffled"]
    if include_cache_hit:
        variants.append("selective_cache_hit")
    for n in n_values:
        need = _decode_bytes(n, cfg)
        avail = psutil.virtual_memory().available * memory_fraction
        if need > avail:
            report.add(n=n, k=cfg.k, variant="skipped", reason=f"needs ~{need / 2**30:.1f} GiB, {avail / 2**30:.1f} GiB usable")
            continue
        b = DecodeBench(cfg, n, seed)
        medians = {}
        with single_threaded():
            for variant in variants:
                samples = time_ns(getattr(b, variant), repeats, warmup)
                med = int(np.median(samples))
                medians[variant] = med
                rec = TimingRecord(variant, n, cfg.k, med, repeats)
                records.append(rec)
                report.add(n=n, k=cfg.k, variant=variant, wall_ns=med, repeats=repeats,
                           min_ns=int(min(samples)), max_ns=int(max(samples)))
        for variant in variants[2:]:
            report.add(n=n, k=cfg.k, variant=f"speedup_{variant}", speedup=medians["full_sdpa"] / medians[variant])
        report.add(n=n, k=cfg.k, variant="speedup_selective_vs_full_fused",
                   speedup=medians["full_fused"] / medians["selective"])
        del b
    return report, records


def error_sweep(
    cfg: EngineConfig,
    spec: WorkloadSpec,
    budgets=(128, 256, 512, 1024, 2048),
    seeds=range(20),
    n_decode: int = 16,
    n_needles: int = 4,
) -> tuple[ExperimentReport, ExperimentReport]:
    """Relative error vs full attention and needle recovery for each budget ``k``.

    For every seed, a needle workload is generated (needles outside the forced
    windows), the first ``n_tokens - n_decode`` tokens are prefilled and the
    rest decoded. Returns ``(per_budget, per_trial)`` reports.
    """
    seeds = list(seeds)
    config = {"engine": cfg.to_dict(), "workload": spec.to_dict(), "budgets": list(budgets),
              "seeds": seeds, "n_decode": n_decode, "n_needles": n_needles}
    trials = ExperimentReport("error_sweep_trials", config, seeds[0] if seeds else 0,
                              metrics=("rel_error", "needle_recovery"))
    n = spec.n_tokens
    n_pre = n - n_decode
    if n_pre < 1:
        raise ContractError("n_decode must leave at least one prefill token")
    for seed in seeds:
        rng = np.random.default_rng(seed)
        lo = min(cfg.n_init, n_pre)
        hi = max(lo + n_needles, n - 1 - cfg.n_local)
        needles = spread_needles(n, n_needles, rng, lo, hi) if n_needles else []
        wl = generate_workload(replace(spec, seed=seed, needle_positions=needles))
        reference = full_reference(wl.q, wl.k, wl.v, cfg)
        for k in budgets:
            run_cfg = replace(cfg, k=k)
            pool = PagedKvPool.for_tokens(n, cfg.num_kv_heads, cfg.head_dim, cfg.page_size, seed=seed)
            seq = pool.create_sequence()
            out_pre = prefill(wl.q[:n_pre], wl.k[:n_pre], wl.v[:n_pre], run_cfg, pool, seq)
            entry = SelectionCacheEntry(theta=cfg.theta)
            trace: list = []
            outs = [out_pre]
            for t in range(n_pre, n):
                outs.append(decode_step(wl.q[t : t + 1], wl.k[t : t + 1], wl.v[t : t + 1], run_cfg, pool, seq, entry, trace))
            out = np.concatenate(outs)
            err = approx_error(reference, out)
            if wl.ground_truth.size:
                attended = trace[-1].union() if trace else np.arange(n - 1)
                recovery = np.isin(wl.ground_truth, attended).mean()
            else:
                recovery = float("nan")
            trials.add(seed=seed, k=k, rel_error=err.relative, abs_error=err.absolute,
                       needle_recovery=float(recovery), cache_hits=entry.stats.hits,
                       cache_lookups=entry.stats.lookups)
    per_budget = ExperimentReport("error_sweep", config, trials.seed, metrics=("mean_rel_error", "needle_recovery"))
    for k in budgets:
        per_budget.add(k=k, mean_rel_error=float(trials.series("rel_error", k=k).mean()),
                       needle_recovery=float(trials.series("needle_recovery", k=k).mean()),
                       seeds=len(seeds))
    return per_budget, trials


def count_inversions(values) -> int:
    """Adjacent increases in a sequence that should be non-increasing."""
    v = np.asarray(values, dtype=np.float64)
    return int((np.diff(v) > 0).sum())


DEFAULT_THETAS = (0.5, 0.6, 0.7, 0.8, 0.85, 0.9, 0.95, 1.0)


def cache_stats(
    cfg: EngineConfig,
    theta_grid=DEFAULT_THETAS,
    n_context: int = 2048,
    n_steps: int = 64,
    similarity: float | tuple[float, float] = (0.85, 1.0),
    seed: int = 0,
) -> ExperimentReport:
    """Replay one decode stream under each threshold in ``theta_grid``.

    Queries follow :func:`query_stream`; context and decode K/V are Gaussian.
    Error for each step is measured against the same stream with reuse
    disabled (always select).
    """
    rng = np.random.default_rng(seed)
    k_ctx = rng.standard_normal((n_context, cfg.kv_width), dtype=np.float32)
    v_ctx = rng.standard_normal((n_context, cfg.kv_width), dtype=np.float32)
    k_dec = rng.standard_normal((n_steps, cfg.kv_width), dtype=np.float32)
    v_dec = rng.standard_normal((n_steps, cfg.kv_width), dtype=np.float32)
    scale = np.sqrt(cfg.q_width)
    queries = (query_stream(n_steps, cfg.q_width, rng, similarity) * scale).astype(np.float32)

    def replay(theta: float):
        pool = PagedKvPool.for_tokens(n_context + n_steps, cfg.num_kv_heads, cfg.head_dim, cfg.page_size)
        seq = pool.create_sequence()
        pool.append_kv(seq, k_ctx, v_ctx)
        entry = SelectionCacheEntry(theta=theta)
        outs = [
            decode_step(queries[t : t + 1], k_dec[t : t + 1], v_dec[t : t + 1], cfg, pool, seq, entry)
            for t in range(n_steps)
        ]
        return np.concatenate(outs), entry

    baseline, _ = replay(float("inf"))
    sim = list(similarity) if isinstance(similarity, tuple) else similarity
    config = {"engine": cfg.to_dict(), "theta_grid": list(theta_grid), "n_context": n_context,
              "n_steps": n_steps, "similarity": sim}
    report = ExperimentReport("cache_stats", config, seed, metrics=("hit_rate", "mean_rel_error"))
    for theta in theta_grid:
        out, entry = replay(theta)
        errs = [approx_error(baseline[t], out[t]).relative for t in range(n_steps)]
        report.add(theta=theta, lookups=entry.stats.lookups, hits=entry.stats.hits,
                   hit_rate=entry.stats.hits / max(1, entry.stats.lookups),
                   mean_rel_error=float(np.mean(errs)))
    return report
