"""KV-cache compression engine and trace-replay harness."""

from .config import POLICIES, CachePolicyConfig
from .errors import (
    BadMagicError,
    ConfigError,
    ContractViolation,
    TraceFormatError,
    TruncatedTraceError,
    VersionMismatchError,
)
from .eviction import (
    CacheState,
    EvictionOutcome,
    empty_state,
    evict_prompt,
    init_prompt_scores,
    step_generation,
)
from .layers import (
    DensityReport,
    LayerBudget,
    compute_density,
    density_report,
    resolve_budgets,
    uniform_budgets,
)
from .merging import (
    MergeDecision,
    MergeGroup,
    MergeWeights,
    SimilarityMatrix,
    apply_merge,
    decide_merges,
    match_nearest,
    merge_weights,
    update_threshold,
)
from .replay import ReplayReport, compare_policies, density_rows, run_replay
from .trace import AttentionTrace, generate_synthetic, read_trace, write_trace

__all__ = [
    "POLICIES",
    "CachePolicyConfig",
    "BadMagicError",
    "ConfigError",
    "ContractViolation",
    "TraceFormatError",
    "TruncatedTraceError",
    "VersionMismatchError",
    "CacheState",
    "EvictionOutcome",
    "empty_state",
    "evict_prompt",
    "init_prompt_scores",
    "step_generation",
    "DensityReport",
    "LayerBudget",
    "compute_density",
    "density_report",
    "resolve_budgets",
    "uniform_budgets",
    "MergeDecision",
    "MergeGroup",
    "MergeWeights",
    "SimilarityMatrix",
    "apply_merge",
    "decide_merges",
    "match_nearest",
    "merge_weights",
    "update_threshold",
    "ReplayReport",
    "compare_policies",
    "density_rows",
    "run_replay",
    "AttentionTrace",
    "generate_synthetic",
    "read_trace",
    "write_trace",
]
