"""Recall-or-discard compensation for evicted tokens.

Evicted keys are matched many-to-one onto their most cosine-similar
conserved key. A similarity threshold maintained as an exponential moving
average decides each token's fate: at or above the threshold the token is
recalled and folded into its match with softmax-style weights (the
conserved token keeps the largest weight via its implicit self-similarity
of 1); below it the token is discarded for good. Key and value rows share
the same weights so KV pairs stay aligned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .eviction import CacheState, EvictionOutcome
from .linalg import cosine_similarity_matrix

PROMPT = "prompt"
GENERATION = "generation"


@dataclass(frozen=True)
class SimilarityMatrix:
    """Pairwise evicted-vs-conserved cosine similarities with row maxima."""

    values: np.ndarray   # (evicted, conserved), entries clamped to [-1, 1]
    argmax: np.ndarray   # per-evicted-row index of the nearest conserved key
    row_max: np.ndarray  # per-evicted-row maximum similarity

    @property
    def evicted_count(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class MergeDecision:
    """Recall/discard verdict per evicted row, against a fixed threshold."""

    threshold: float
    recalled: np.ndarray  # bool per evicted row
    targets: np.ndarray   # conserved index per evicted row (nearest match)


@dataclass(frozen=True)
class MergeGroup:
    """Fusion weights for one conserved row and its recalled tokens."""

    conserved_index: int
    conserved_weight: float
    evicted_indices: np.ndarray
    evicted_weights: np.ndarray


@dataclass(frozen=True)
class MergeWeights:
    groups: tuple[MergeGroup, ...]


def match_nearest(evicted_keys: np.ndarray, conserved_keys: np.ndarray) -> SimilarityMatrix:
    """Cosine similarities of every evicted key against every conserved key.

    Per-row argmax ties resolve to the lowest conserved index. An empty
    evicted set yields an empty matrix; an empty conserved set is an error
    (there is nothing to merge into).
    """
    if conserved_keys.shape[0] == 0:
        raise ContractViolation("match_nearest requires a nonempty conserved set")
    if evicted_keys.shape[0] == 0:
        return SimilarityMatrix(
            values=np.empty((0, conserved_keys.shape[0])),
            argmax=np.empty(0, dtype=np.int64),
            row_max=np.empty(0),
        )
    sims = cosine_similarity_matrix(evicted_keys, conserved_keys)
    return SimilarityMatrix(
        values=sims,
        argmax=sims.argmax(axis=1).astype(np.int64),
        row_max=sims.max(axis=1),
    )


def update_threshold(
    previous: float | None,
    sims: SimilarityMatrix,
    beta: float,
    phase: str,
) -> float | None:
    """Advance the merge threshold for one eviction event.

    Prompt phase: the threshold initializes to the mean of the per-evicted
    row maxima (stays unset when nothing was evicted). Generation phase:
    exponential moving average beta * max + (1 - beta) * previous over the
    single evicted row; if the prompt never set a threshold, the first
    generation eviction initializes it the same way the prompt would.
    """
    if not (0.0 <= beta <= 1.0):
        raise ContractViolation(f"beta must be in [0, 1], got {beta}")
    if phase == PROMPT:
        if previous is not None:
            raise ContractViolation("prompt-phase threshold update requires an unset threshold")
        if sims.evicted_count == 0:
            return None
        return float(sims.row_max.mean())
    if phase == GENERATION:
        if sims.evicted_count != 1:
            raise ContractViolation(
                f"generation-phase update expects a single evicted row, got {sims.evicted_count}"
            )
        current = float(sims.row_max[0])
        if previous is None:
            return current
        return beta * current + (1.0 - beta) * previous
    raise ContractViolation(f"unknown phase {phase!r}")


def decide_merges(sims: SimilarityMatrix, threshold: float) -> MergeDecision:
    """Recall rows whose best similarity reaches the threshold; drop the rest."""
    return MergeDecision(
        threshold=threshold,
        recalled=sims.row_max >= threshold,
        targets=sims.argmax.copy(),
    )


def merge_weights(sims: SimilarityMatrix, decision: MergeDecision) -> MergeWeights:
    """Softmax-style fusion weights per targeted conserved row.

    For conserved row j with recalled set R_j the denominator is
    sum_{i in R_j} exp(u_ij) + e, where the bare e is exp(1), the conserved
    token's own self-similarity term. Weights in each group sum to 1 and
    the conserved weight is the maximum (ties only at similarity 1).
    """
    groups = []
    recalled_rows = np.flatnonzero(decision.recalled)
    if recalled_rows.size == 0:
        return MergeWeights(groups=())
    by_target: dict[int, list[int]] = {}
    for i in recalled_rows:
        by_target.setdefault(int(decision.targets[i]), []).append(int(i))
    for j in sorted(by_target):
        rows = np.asarray(by_target[j], dtype=np.int64)
        expd = np.exp(sims.values[rows, j])
        denom = float(expd.sum()) + math.e
        groups.append(MergeGroup(
            conserved_index=j,
            conserved_weight=math.e / denom,
            evicted_indices=rows,
            evicted_weights=expd / denom,
        ))
    return MergeWeights(groups=tuple(groups))


def apply_merge(state: CacheState, outcome: EvictionOutcome, weights: MergeWeights) -> CacheState:
    """Fold recalled evicted rows into their conserved targets.

    The identical weight vector is applied to key and value rows. Cache
    size, origin ids, and attention scores are untouched; merging only
    rewrites the targeted KV contents.
    """
    for group in weights.groups:
        j = group.conserved_index
        if not (0 <= j < state.size):
            raise ContractViolation(f"merge target {j} outside cache of size {state.size}")
        state.keys[j] = (
            group.conserved_weight * state.keys[j]
            + group.evicted_weights @ outcome.keys[group.evicted_indices]
        )
        state.values[j] = (
            group.conserved_weight * state.values[j]
            + group.evicted_weights @ outcome.values[group.evicted_indices]
        )
    return state
