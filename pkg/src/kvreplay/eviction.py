"""Cumulative-attention-score cache with sink/recent protection.

One CacheState exists per (layer, head). The prompt phase scores every
prompt token by the column sum of the causal prompt attention matrix and
keeps the leading sink segment, the top-scored middle tokens, and the
recent window. Each generation step appends the new KV pair, attends over
the cache, folds the fresh softmax row into the running scores, and - when
over budget - evicts the single lowest-scored token outside the protected
segments.

Rows are kept in original token order throughout, so the sink segment is
always the leading rows and the recent window the trailing ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .layers import LayerBudget
from .linalg import causal_softmax
from .trace import AttentionTrace


@dataclass
class CacheState:
    """Conserved keys/values plus bookkeeping for one (layer, head)."""

    layer: int
    head: int
    budget: LayerBudget
    keys: np.ndarray
    values: np.ndarray
    attn_score: np.ndarray
    origin_ids: np.ndarray
    ema_threshold: float | None = None
    step: int = 0
    next_origin: int = 0

    @property
    def size(self) -> int:
        return self.keys.shape[0]

    def sink_rows(self) -> int:
        # origin_ids are sorted, so the sink segment is a prefix.
        return int(np.searchsorted(self.origin_ids, self.budget.sink, side="left"))

    def check_invariants(self) -> None:
        n = self.size
        if not (self.values.shape[0] == self.attn_score.shape[0] == self.origin_ids.shape[0] == n):
            raise ContractViolation("cache row bookkeeping out of sync")
        if n and np.any(np.diff(self.origin_ids) <= 0):
            raise ContractViolation("origin_ids must be strictly increasing")
        if np.any(self.attn_score < 0):
            raise ContractViolation("attention scores must be non-negative")


@dataclass(frozen=True)
class EvictionOutcome:
    """Rows removed from the cache by one eviction decision."""

    keys: np.ndarray
    values: np.ndarray
    origin_ids: np.ndarray

    @property
    def count(self) -> int:
        return self.origin_ids.shape[0]

    @staticmethod
    def empty(head_dim: int) -> "EvictionOutcome":
        return EvictionOutcome(
            keys=np.empty((0, head_dim)),
            values=np.empty((0, head_dim)),
            origin_ids=np.empty(0, dtype=np.int64),
        )


def empty_state(layer: int, head: int, budget: LayerBudget, head_dim: int) -> CacheState:
    return CacheState(
        layer=layer,
        head=head,
        budget=budget,
        keys=np.empty((0, head_dim)),
        values=np.empty((0, head_dim)),
        attn_score=np.empty(0),
        origin_ids=np.empty(0, dtype=np.int64),
    )


def prompt_attention_scores(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Column sums of the causal attention matrix over a prompt region."""
    attn = causal_softmax((q @ k.T) / math.sqrt(k.shape[1]))
    return attn.sum(axis=0)


def init_prompt_scores(trace: AttentionTrace, layer: int, head: int) -> np.ndarray:
    """Column sums of the causal prompt attention matrix for one head."""
    p = trace.prompt_len
    return prompt_attention_scores(trace.q[layer, head, :p], trace.k[layer, head, :p])


def evict_prompt(
    state: CacheState,
    keys: np.ndarray,
    values: np.ndarray,
    scores: np.ndarray,
) -> tuple[CacheState, EvictionOutcome]:
    """Select the conserved prompt set: sinks + top-scored middle + recents.

    Ties in the middle segment go to the lower token index. An
    effectively-full layer conserves everything. The state must be empty.
    """
    if state.size != 0:
        raise ContractViolation("evict_prompt requires an empty cache state")
    n = keys.shape[0]
    if not (scores.shape[0] == n == values.shape[0]):
        raise ContractViolation(
            f"prompt rows disagree: keys={keys.shape[0]} values={values.shape[0]} scores={scores.shape[0]}"
        )

    budget = state.budget
    if budget.effectively_full or budget.total >= n:
        keep = np.arange(n, dtype=np.int64)
    else:
        sink = np.arange(budget.sink, dtype=np.int64)
        middle = np.arange(budget.sink, n - budget.recent, dtype=np.int64)
        recent = np.arange(n - budget.recent, n, dtype=np.int64)
        # Sort by descending score, then ascending index, and take the top N.
        order = np.lexsort((middle, -scores[middle]))
        top = np.sort(middle[order[:budget.top]])
        keep = np.concatenate([sink, top, recent])

    keep_mask = np.zeros(n, dtype=bool)
    keep_mask[keep] = True
    dropped = np.flatnonzero(~keep_mask).astype(np.int64)

    state.keys = keys[keep].copy()
    state.values = values[keep].copy()
    state.attn_score = scores[keep].copy()
    state.origin_ids = keep
    state.next_origin = n

    outcome = EvictionOutcome(
        keys=keys[dropped].copy(),
        values=values[dropped].copy(),
        origin_ids=dropped,
    )
    return state, outcome


def step_generation(
    state: CacheState,
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
) -> tuple[CacheState, EvictionOutcome, np.ndarray]:
    """Append one KV pair, attend over the cache, update scores, and evict.

    The attention output is computed over the cache including the freshly
    appended token. The new token's score starts at its own softmax weight.
    If the cache then exceeds its budget, the lowest-scored token outside
    the sink segment and outside the most recent `recent` rows is evicted
    (ties to the lowest token index). Effectively-full layers never evict.
    """
    if state.next_origin == 0:
        raise ContractViolation("step_generation requires a prompt-initialized state")
    head_dim = state.keys.shape[1]

    state.keys = np.vstack([state.keys, _as_row(k)])
    state.values = np.vstack([state.values, _as_row(v)])
    state.attn_score = np.append(state.attn_score, 0.0)
    state.origin_ids = np.append(state.origin_ids, np.int64(state.next_origin))
    state.next_origin += 1

    logits = (state.keys @ np.asarray(q, dtype=np.float64)) / math.sqrt(head_dim)
    weights = causal_softmax(logits[None, :])[0]
    output = weights @ state.values
    state.attn_score = state.attn_score + weights

    outcome = EvictionOutcome.empty(head_dim)
    budget = state.budget
    if not budget.effectively_full and state.size > budget.total:
        lo = state.sink_rows()
        hi = state.size - budget.recent
        if hi <= lo:
            raise ContractViolation("no evictable rows between sink and recent segments")
        candidates = state.attn_score[lo:hi]
        victim = lo + int(np.argmin(candidates))
        outcome = EvictionOutcome(
            keys=state.keys[victim:victim + 1].copy(),
            values=state.values[victim:victim + 1].copy(),
            origin_ids=state.origin_ids[victim:victim + 1].copy(),
        )
        keep = np.ones(state.size, dtype=bool)
        keep[victim] = False
        state.keys = state.keys[keep]
        state.values = state.values[keep]
        state.attn_score = state.attn_score[keep]
        state.origin_ids = state.origin_ids[keep]

    state.step += 1
    return state, outcome, output


def _as_row(vec: np.ndarray) -> np.ndarray:
    """View a 1-D vector as a single matrix row."""
    arr = np.asarray(vec, dtype=np.float64)
    if arr.ndim == 1:
        return arr[None, :]
    return arr
