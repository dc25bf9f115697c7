import numpy as np
import pytest

from kvselect import PagedKvPool


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def filled_pool(rng, n_tokens, num_kv_heads=2, head_dim=8, page_size=1, seed=None, extra_frames=0):
    """Pool holding one sequence of random K/V; returns (pool, seq, K, V)."""
    frames = -(-n_tokens // page_size) + extra_frames
    pool = PagedKvPool(max(frames, 1), num_kv_heads, head_dim, page_size=page_size, seed=seed)
    seq = pool.create_sequence()
    k = rng.standard_normal((n_tokens, num_kv_heads * head_dim)).astype(np.float32)
    v = rng.standard_normal((n_tokens, num_kv_heads * head_dim)).astype(np.float32)
    if n_tokens:
        pool.append_kv(seq, k, v)
    return pool, seq, k, v


_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record a one-line PASS/FAIL for an acceptance criterion, then assert it."""

    def record(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'}  criterion {number}: {title} | {detail}"
        _VERDICTS.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
