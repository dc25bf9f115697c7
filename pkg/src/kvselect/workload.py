"""Synthetic Q/K/V workloads with planted needles.

Attention sparsity here comes from construction (needles on top of Gaussian
noise), not from a trained model.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import ContractError
from .lemma import RecallWorkload


@dataclass
class WorkloadSpec:
    n_tokens: int = 4096
    n_heads: int = 8
    n_kv_heads: int = 8
    head_dim: int = 64
    needle_positions: list[int] = field(default_factory=list)
    # raw dot-product margin of a needle over the best distractor, for the probe query
    needle_strength: float = 80.0
    seed: int = 0

    def validate(self) -> None:
        if self.n_tokens < 1 or self.n_heads < 1 or self.n_kv_heads < 1 or self.head_dim < 1:
            raise ContractError("workload dimensions must be positive")
        if self.n_heads % self.n_kv_heads:
            raise ContractError("n_heads must be a multiple of n_kv_heads")
        for p in self.needle_positions:
            # the probe is the last token, so needles must precede it
            if not 0 <= p < self.n_tokens - 1:
                raise ContractError(f"needle position {p} must lie in [0, {self.n_tokens - 1})")
        if self.needle_strength < 0:
            raise ContractError("needle_strength must be >= 0")

    @classmethod
    def from_dict(cls, data: dict) -> "WorkloadSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ContractError(f"unknown workload keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Workload:
    q: np.ndarray  # [n, H*d]
    k: np.ndarray  # [n, H_kv*d]
    v: np.ndarray  # [n, H_kv*d]
    ground_truth: np.ndarray  # needle indices
    payload: np.ndarray  # [H_kv, d] unit payload direction per KV head
    spec: WorkloadSpec

    @property
    def probe_index(self) -> int:
        return self.q.shape[0] - 1

    def payload_for_query_heads(self) -> np.ndarray:
        s = self.spec
        return self.payload[np.arange(s.n_heads) % s.n_kv_heads].reshape(-1)


def generate_workload(spec: WorkloadSpec) -> Workload:
    """Gaussian Q/K/V with needles planted for the final (probe) query.

    Every query head that shares a KV head gets the same probe vector, and
    each needle key scores ``needle_strength`` above the best distractor for
    that probe. Needle values point along a per-KV-head payload direction.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n, h, g, d = spec.n_tokens, spec.n_heads, spec.n_kv_heads, spec.head_dim
    q = rng.standard_normal((n, h, d)).astype(np.float32)
    k = rng.standard_normal((n, g, d)).astype(np.float32)
    v = rng.standard_normal((n, g, d)).astype(np.float32)
    payload = rng.standard_normal((g, d))
    payload /= np.linalg.norm(payload, axis=1, keepdims=True)
    needles = np.array(sorted(set(spec.needle_positions)), dtype=np.int64)
    probe = n - 1
    q[probe] = q[probe, np.arange(h) % g]
    if needles.size:
        others = np.setdiff1d(np.arange(probe), needles)
        for head in range(g):
            qg = q[probe, head].astype(np.float64)
            u = qg / np.linalg.norm(qg)
            best = float((k[others, head].astype(np.float64) @ qg).max()) if others.size else 0.0
            target = (best + spec.needle_strength) / np.linalg.norm(qg)
            kn = k[needles, head].astype(np.float64)
            kn = kn - np.outer(kn @ u, u) + target * u
            k[needles, head] = kn
            v[needles, head] = payload[head] * math.sqrt(d)
    return Workload(
        q=q.reshape(n, h * d),
        k=k.reshape(n, g * d),
        v=v.reshape(n, g * d),
        ground_truth=needles,
        payload=payload,
        spec=spec,
    )


def spread_needles(n_tokens: int, n_needles: int, rng: np.random.Generator, lo: int = 0, hi: int | None = None) -> list[int]:
    hi = n_tokens - 1 if hi is None else hi
    return sorted(int(x) for x in rng.choice(np.arange(lo, hi), size=n_needles, replace=False))


def scattered_recall_workload(
    n_tokens: int = 16384,
    n_needles: int = 64,
    head_dim: int = 64,
    strength: float = 12.0,
    seed: int = 0,
    spacing: int = 128,
) -> RecallWorkload:
    """Critical tokens scattered one per ``spacing``-sized region.

    ``n_needles`` distinct regions are drawn at random and one needle is placed
    at a random offset inside each. ``strength`` is the needle logit (after
    the 1/sqrt(d) scale) in units of the distractor standard deviation, with
    a small jitter so needle masses differ.
    """
    regions = n_tokens // spacing
    if n_needles > regions:
        raise ContractError(f"{n_needles} needles do not fit in {regions} regions of {spacing}")
    rng = np.random.default_rng(seed)
    query = rng.standard_normal(head_dim)
    keys = rng.standard_normal((n_tokens, head_dim))
    chosen = np.sort(rng.choice(regions, size=n_needles, replace=False))
    pos = chosen * spacing + rng.integers(0, spacing, size=n_needles)
    u = query / np.linalg.norm(query)
    logit = (strength + rng.uniform(0.0, 1.0, size=n_needles)) * math.sqrt(head_dim)
    base = keys[pos] - np.outer(keys[pos] @ u, u)
    keys[pos] = base + np.outer(logit / np.linalg.norm(query), u)
    return RecallWorkload(query=query, keys=keys, planted=pos.astype(np.int64), seed=seed)


def query_stream(
    n_steps: int,
    width: int,
    rng: np.random.Generator,
    similarity: float | tuple[float, float] = (0.85, 1.0),
) -> np.ndarray:
    """Random walk on the sphere with controlled consecutive cosine similarity.

    ``similarity`` is either a fixed cosine or a ``(lo, hi)`` range sampled
    per step. A fixed value of 1 yields an identical-query stream.
    """
    out = np.empty((n_steps, width))
    cur = rng.standard_normal(width)
    cur /= np.linalg.norm(cur)
    for t in range(n_steps):
        out[t] = cur
        if isinstance(similarity, tuple):
            c = rng.uniform(*similarity)
        else:
            c = float(similarity)
        if c >= 1.0:
            continue
        r = rng.standard_normal(width)
        r -= (r @ cur) * cur
        r /= np.linalg.norm(r)
        cur = c * cur + math.sqrt(1.0 - c * c) * r
        cur /= np.linalg.norm(cur)
    return out
