"""Per-layer attention-density metric and cache-budget resolution.

Each layer's prompt attention is summarized by the population variance of
its column sums (computed on the head-averaged attention matrix). Layers
at or below the gate are "dense": their attention spreads broadly, token
importance is hard to rank, and they receive the enlarged alpha-scaled
budget. Layers above the gate are "sparse" and get the base budget.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import CachePolicyConfig
from .errors import ConfigError, ContractViolation
from .linalg import causal_softmax, column_sum_variance
from .trace import AttentionTrace

DENSE = "dense"
SPARSE = "sparse"


@dataclass(frozen=True)
class DensityReport:
    """Per-layer variance metric plus its dense/sparse classification."""

    gate: float
    variances: tuple[float, ...]

    def classification(self, layer: int) -> str:
        # Equality falls on the dense side: only strictly-higher variance
        # earns the small budget.
        return DENSE if self.variances[layer] <= self.gate else SPARSE

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(self.classification(i) for i in range(len(self.variances)))


@dataclass(frozen=True)
class LayerBudget:
    """Resolved cache size for one layer, split into its three segments."""

    layer: int
    total: int
    sink: int      # always-kept leading tokens
    top: int       # budget for top-scored middle tokens
    recent: int    # always-kept trailing window
    effectively_full: bool

    def __post_init__(self):
        if self.sink + self.top + self.recent != self.total:
            raise ContractViolation(
                f"budget split {self.sink}+{self.top}+{self.recent} != total {self.total}"
            )
        if min(self.sink, self.top, self.recent) < 0:
            raise ContractViolation("budget segments must be non-negative")


def compute_density(trace: AttentionTrace, layer: int) -> float:
    """Column-sum variance of the head-averaged prompt attention matrix."""
    if not (0 <= layer < trace.num_layers):
        raise ContractViolation(f"layer {layer} out of range [0, {trace.num_layers})")
    p = trace.prompt_len
    scale = math.sqrt(trace.head_dim)
    mean_attn = np.zeros((p, p))
    for head in range(trace.num_heads):
        q = trace.q[layer, head, :p]
        k = trace.k[layer, head, :p]
        mean_attn += causal_softmax((q @ k.T) / scale)
    mean_attn /= trace.num_heads
    return column_sum_variance(mean_attn)


def density_report(trace: AttentionTrace, gate: float) -> DensityReport:
    return DensityReport(
        gate=gate,
        variances=tuple(compute_density(trace, layer) for layer in range(trace.num_layers)),
    )


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _split_ratio(remaining: int, top_part: int, recent_part: int) -> tuple[int, int]:
    """Largest-remainder split of `remaining` into top:recent parts.

    Ties favor the top segment; both segments are forced to >= 1 whenever
    remaining >= 2 so a non-full layer always hosts at least one important
    and one recent token.
    """
    whole = top_part + recent_part
    exact_top = remaining * top_part / whole
    exact_recent = remaining * recent_part / whole
    top = math.floor(exact_top)
    recent = math.floor(exact_recent)
    if top + recent < remaining:
        if (exact_top - top) >= (exact_recent - recent):
            top += 1
        else:
            recent += 1
    if remaining >= 2:
        if recent == 0:
            recent, top = 1, top - 1
        elif top == 0:
            top, recent = 1, recent - 1
    return top, recent


def resolve_budgets(
    densities: DensityReport | tuple[float, ...] | list[float],
    config: CachePolicyConfig,
    prompt_len: int,
) -> list[LayerBudget]:
    """Turn per-layer densities into per-layer cache budgets.

    The base size is round(r * prompt_len); dense layers get the alpha-scaled
    size clamped to the prompt length. Sink tokens are a fixed structural
    segment, so alpha scales only the top+recent remainder. A layer whose
    size reaches the prompt length is flagged effectively-full and performs
    no eviction in either phase.
    """
    config.validate()
    if isinstance(densities, DensityReport):
        report = densities
    else:
        report = DensityReport(gate=config.gate, variances=tuple(float(d) for d in densities))

    sink = config.sink_tokens
    if config.budget_fraction * prompt_len < sink + 2:
        raise ConfigError(
            f"budget r*prompt_len = {config.budget_fraction * prompt_len:.2f} cannot host "
            f"{sink} sink tokens plus one important and one recent token"
        )
    base = _round_half_up(config.budget_fraction * prompt_len)

    budgets = []
    for layer in range(len(report.variances)):
        if report.classification(layer) == DENSE:
            total = min(_round_half_up(config.alpha * base), prompt_len)
        else:
            total = base
        effectively_full = total >= prompt_len
        top, recent = _split_ratio(total - sink, *config.ratio)
        budgets.append(LayerBudget(
            layer=layer, total=total, sink=sink, top=top, recent=recent,
            effectively_full=effectively_full,
        ))
    return budgets


def uniform_budgets(config: CachePolicyConfig, prompt_len: int, num_layers: int) -> list[LayerBudget]:
    """Budgets for baselines that ignore the density gate: every layer gets
    the base size with the same sink/top/recent split."""
    flat = DensityReport(gate=config.gate, variances=tuple([config.gate + 1.0] * num_layers))
    return resolve_budgets(flat, config, prompt_len)
