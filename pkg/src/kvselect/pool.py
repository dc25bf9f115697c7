"""Token-level paged KV storage.

Each sequence sees a logically contiguous cache ``[0, logical_len)``; the
tokens actually live in fixed-size page frames scattered across a slab that
is allocated once up front. K and V have separate slabs that share page
tables.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, ContractError, DoubleReleaseError
from .kernels import DEFAULT_DTYPE


@dataclass
class SequenceHandle:
    seq_id: int
    logical_len: int = 0
    # frame id for every page owned by the sequence, in logical order
    pages: list[int] = field(default_factory=list)
    released: bool = False
    _page_arr: np.ndarray | None = field(default=None, repr=False)

    def page_array(self) -> np.ndarray:
        if self._page_arr is None or self._page_arr.size != len(self.pages):
            self._page_arr = np.asarray(self.pages, dtype=np.int64)
        return self._page_arr


class PagedKvPool:
    """Fixed-capacity pool of K/V page frames.

    Args:
        num_frames: total page frames in the slab.
        num_kv_heads: number of KV heads stored per token.
        head_dim: per-head dimension.
        page_size: tokens per frame (1 = token-level paging).
        seed: if given, the free list is shuffled with this seed so physical
            placement is scattered; placement is never observable through the
            public API.
    """

    def __init__(
        self,
        num_frames: int,
        num_kv_heads: int,
        head_dim: int,
        page_size: int = 1,
        dtype=DEFAULT_DTYPE,
        seed: int | None = None,
    ):
        if page_size < 1:
            raise ContractError(f"page_size must be >= 1, got {page_size}")
        if num_frames < 0 or num_kv_heads < 1 or head_dim < 1:
            raise ContractError("pool dimensions must be positive")
        self.num_frames = num_frames
        self.num_kv_heads = num_kv_heads
        self.head_dim = head_dim
        self.page_size = page_size
        self.dtype = np.dtype(dtype)
        shape = (num_frames, page_size, num_kv_heads, head_dim)
        self.k_slab = np.zeros(shape, dtype=self.dtype)
        self.v_slab = np.zeros(shape, dtype=self.dtype)
        order = np.arange(num_frames)
        if seed is not None:
            order = np.random.default_rng(seed).permutation(num_frames)
        # pop() takes from the end, so reverse to hand out order[0] first
        self.free_list: list[int] = [int(f) for f in order[::-1]]
        self._owner: dict[int, int] = {}
        self._sequences: dict[int, SequenceHandle] = {}
        self._ids = itertools.count()

    @classmethod
    def for_tokens(cls, n_tokens: int, num_kv_heads: int, head_dim: int, page_size: int = 1, **kw):
        """Pool sized to hold ``n_tokens`` tokens for a single sequence."""
        frames = -(-n_tokens // page_size)
        return cls(frames, num_kv_heads, head_dim, page_size=page_size, **kw)

    @property
    def row_width(self) -> int:
        return self.num_kv_heads * self.head_dim

    @property
    def free_frames(self) -> int:
        return len(self.free_list)

    @property
    def allocated_frames(self) -> int:
        return len(self._owner)

    def shuffle_free_list(self, rng: np.random.Generator) -> None:
        rng.shuffle(self.free_list)

    def create_sequence(self) -> SequenceHandle:
        # A sequence needs at least one frame to ever hold a token.
        if not self.free_list:
            raise CapacityError("pool exhausted: no free frames for a new sequence")
        seq = SequenceHandle(seq_id=next(self._ids))
        self._sequences[seq.seq_id] = seq
        return seq

    def _check_live(self, seq: SequenceHandle) -> None:
        if seq.released or self._sequences.get(seq.seq_id) is not seq:
            raise ContractError(f"sequence {seq.seq_id} is not live in this pool")

    def append_kv(self, seq: SequenceHandle, k_new, v_new) -> range:
        """Append ``t`` tokens; returns the logical range they occupy.

        ``k_new``/``v_new`` are ``[t, num_kv_heads * head_dim]``. Either all
        tokens are stored or, on :class:`CapacityError`, none are.
        """
        self._check_live(seq)
        k = np.asarray(k_new)
        v = np.asarray(v_new)
        if k.ndim == 1:
            k, v = k[None, :], v[None, :]
        if k.shape != v.shape or k.ndim != 2 or k.shape[1] != self.row_width:
            raise ContractError(
                f"expected K/V of shape [t, {self.row_width}], got {k.shape} and {v.shape}"
            )
        t = k.shape[0]
        start = seq.logical_len
        ps = self.page_size
        need = -(-(start + t) // ps) - len(seq.pages)
        if need > len(self.free_list):
            raise CapacityError(
                f"pool exhausted: need {need} frames, {len(self.free_list)} free"
            )
        for _ in range(need):
            frame = self.free_list.pop()
            self._owner[frame] = seq.seq_id
            seq.pages.append(frame)
        pos = np.arange(start, start + t)
        frames = seq.page_array()[pos // ps]
        offs = pos % ps
        kh = k.reshape(t, self.num_kv_heads, self.head_dim)
        vh = v.reshape(t, self.num_kv_heads, self.head_dim)
        self.k_slab[frames, offs] = kh
        self.v_slab[frames, offs] = vh
        seq.logical_len = start + t
        return range(start, start + t)

    def _locate(self, seq: SequenceHandle, idx) -> tuple[np.ndarray, np.ndarray]:
        self._check_live(seq)
        arr = np.asarray(idx, dtype=np.int64).reshape(-1)
        if arr.size:
            bad = arr[(arr < 0) | (arr >= seq.logical_len)]
            if bad.size:
                raise ContractError(
                    f"index {int(bad[0])} out of range for sequence of length {seq.logical_len}"
                )
        return seq.page_array()[arr // self.page_size], arr % self.page_size

    def token_rows(self, seq: SequenceHandle, idx) -> np.ndarray:
        """Physical slab rows (``frame * page_size + offset``) for logical ``idx``."""
        frames, offs = self._locate(seq, idx)
        return frames * self.page_size + offs

    def head_view(self, which: str = "k") -> np.ndarray:
        """The K or V slab viewed as ``[slab_rows, num_kv_heads, head_dim]``."""
        slab = self.k_slab if which == "k" else self.v_slab
        return slab.reshape(-1, self.num_kv_heads, self.head_dim)

    def gather_heads(self, seq: SequenceHandle, idx, which: str = "k") -> np.ndarray:
        """Rows at logical ``idx`` as a ``[len, num_kv_heads, head_dim]`` array."""
        return np.take(self.head_view(which), self.token_rows(seq, idx), axis=0)

    def gather(self, seq: SequenceHandle, idx) -> tuple[np.ndarray, np.ndarray]:
        """K and V rows at logical ``idx`` (order preserved), each ``[len, H_kv*d]``."""
        rows = self.token_rows(seq, idx)
        k = np.take(self.k_slab.reshape(-1, self.row_width), rows, axis=0)
        v = np.take(self.v_slab.reshape(-1, self.row_width), rows, axis=0)
        return k, v

    def release(self, seq: SequenceHandle) -> None:
        if seq.released:
            raise DoubleReleaseError(f"sequence {seq.seq_id} already released")
        self._check_live(seq)
        for frame in seq.pages:
            del self._owner[frame]
            self.free_list.append(frame)
        seq.pages.clear()
        seq.logical_len = 0
        seq.released = True
        del self._sequences[seq.seq_id]

    def page_table(self, seq: SequenceHandle) -> dict:
        """Debug view of a sequence's page table."""
        return {"seq_id": seq.seq_id, "logical_len": seq.logical_len, "frames": list(seq.pages)}

    def dump_page_table(self, seq: SequenceHandle) -> str:
        return json.dumps(self.page_table(seq))
