"""Token-level selective sparse attention over a paged KV cache."""

from .engine import (
    AttentionWindows,
    EngineConfig,
    approx_error,
    decode_step,
    prefill,
    sdpa_full,
    sparse_attend,
)
from .errors import CapacityError, ContractError, DoubleReleaseError
from .pool import PagedKvPool, SequenceHandle
from .selection_cache import CacheStats, SelectionCacheEntry, hit_rate, lookup_or_select
from .selector import (
    CriticalityScores,
    SelectionResult,
    score_paged,
    select_for_chunk,
    select_head_soft_vote,
    select_head_vote,
    select_topk,
)

__version__ = "0.1.0"
