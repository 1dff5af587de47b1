"""Per-(layer, head) replay heads for every cache policy.

Each head ingests the prompt once (choosing what survives prompt-time
compression) and then replays generation one token at a time: append the
new KV pair, attend over whatever is currently cached, then apply the
policy's eviction rule. Attention always runs over the cache including
the freshly appended token, before any eviction.

The heavy-hitter baseline here is deliberately written with plain lists
and sorted() rather than the engine's vectorized path: it serves as an
independent implementation that the compressed engine must agree with
decision-for-decision when merging and gating are switched off.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import CachePolicyConfig
from .errors import ContractViolation
from .eviction import empty_state, evict_prompt, prompt_attention_scores, step_generation
from .layers import LayerBudget
from .linalg import causal_softmax
from .merging import (
    GENERATION,
    PROMPT,
    apply_merge,
    decide_merges,
    match_nearest,
    merge_weights,
    update_threshold,
)


@dataclass
class StepResult:
    """What one generation step produced for one (layer, head)."""

    output: np.ndarray
    attended_origins: np.ndarray   # origins present when attention ran
    evicted_origins: np.ndarray
    merge_events: list[dict] = field(default_factory=list)


def _attend(q: np.ndarray, keys: np.ndarray, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    logits = (keys @ np.asarray(q, dtype=np.float64)) / math.sqrt(keys.shape[1])
    weights = causal_softmax(logits[None, :])[0]
    return weights, weights @ values


class FullHead:
    """No compression: the cache keeps every token."""

    def __init__(self, layer: int, head: int, head_dim: int):
        self.layer = layer
        self.head = head
        self.keys = np.empty((0, head_dim))
        self.values = np.empty((0, head_dim))
        self.origins = np.empty(0, dtype=np.int64)
        self.ema_threshold = None
        self.last_weights = np.empty(0)

    def ingest_prompt(self, q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
        self.keys = k.copy()
        self.values = v.copy()
        self.origins = np.arange(k.shape[0], dtype=np.int64)
        return np.empty(0, dtype=np.int64)

    def step(self, q: np.ndarray, k: np.ndarray, v: np.ndarray) -> StepResult:
        self.keys = np.vstack([self.keys, k[None, :]])
        self.values = np.vstack([self.values, v[None, :]])
        self.origins = np.append(self.origins, np.int64(self.origins.shape[0]))
        weights, output = _attend(q, self.keys, self.values)
        self.last_weights = weights
        return StepResult(
            output=output,
            attended_origins=self.origins.copy(),
            evicted_origins=np.empty(0, dtype=np.int64),
        )


class LocalWindowHead:
    """Keep exactly the last `size` tokens, nothing else."""

    def __init__(self, layer: int, head: int, head_dim: int, size: int):
        self.layer = layer
        self.head = head
        self.size = size
        self.keys = np.empty((0, head_dim))
        self.values = np.empty((0, head_dim))
        self.origins = np.empty(0, dtype=np.int64)
        self.next_origin = 0
        self.ema_threshold = None

    def ingest_prompt(self, q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
        n = k.shape[0]
        start = max(0, n - self.size)
        self.keys = k[start:].copy()
        self.values = v[start:].copy()
        self.origins = np.arange(start, n, dtype=np.int64)
        self.next_origin = n
        return np.arange(0, start, dtype=np.int64)

    def step(self, q: np.ndarray, k: np.ndarray, v: np.ndarray) -> StepResult:
        self.keys = np.vstack([self.keys, k[None, :]])
        self.values = np.vstack([self.values, v[None, :]])
        self.origins = np.append(self.origins, np.int64(self.next_origin))
        self.next_origin += 1
        weights, output = _attend(q, self.keys, self.values)
        attended = self.origins.copy()
        evicted = np.empty(0, dtype=np.int64)
        if self.origins.shape[0] > self.size:
            evicted = self.origins[:1].copy()
            self.keys = self.keys[1:]
            self.values = self.values[1:]
            self.origins = self.origins[1:]
        return StepResult(output, attended, evicted)


class StreamingHead:
    """Keep `sink` leading tokens plus a sliding window of size - sink."""

    def __init__(self, layer: int, head: int, head_dim: int, size: int, sink: int):
        if size <= sink:
            raise ContractViolation(f"streaming size {size} must exceed sink count {sink}")
        self.layer = layer
        self.head = head
        self.size = size
        self.sink = sink
        self.keys = np.empty((0, head_dim))
        self.values = np.empty((0, head_dim))
        self.origins = np.empty(0, dtype=np.int64)
        self.next_origin = 0
        self.ema_threshold = None

    def ingest_prompt(self, q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
        n = k.shape[0]
        if n <= self.size:
            keep = np.arange(n, dtype=np.int64)
        else:
            sinks = np.arange(self.sink, dtype=np.int64)
            window = np.arange(n - (self.size - self.sink), n, dtype=np.int64)
            keep = np.concatenate([sinks, window])
        self.keys = k[keep].copy()
        self.values = v[keep].copy()
        self.origins = keep
        self.next_origin = n
        mask = np.ones(n, dtype=bool)
        mask[keep] = False
        return np.flatnonzero(mask).astype(np.int64)

    def step(self, q: np.ndarray, k: np.ndarray, v: np.ndarray) -> StepResult:
        self.keys = np.vstack([self.keys, k[None, :]])
        self.values = np.vstack([self.values, v[None, :]])
        self.origins = np.append(self.origins, np.int64(self.next_origin))
        self.next_origin += 1
        weights, output = _attend(q, self.keys, self.values)
        attended = self.origins.copy()
        evicted = np.empty(0, dtype=np.int64)
        if self.origins.shape[0] > self.size:
            # Oldest non-sink row sits right after the sink prefix.
            victim = int(np.searchsorted(self.origins, self.sink, side="left"))
            evicted = self.origins[victim:victim + 1].copy()
            keep = np.ones(self.origins.shape[0], dtype=bool)
            keep[victim] = False
            self.keys = self.keys[keep]
            self.values = self.values[keep]
            self.origins = self.origins[keep]
        return StepResult(output, attended, evicted)


class HeavyHitterHead:
    """Cumulative-attention eviction: sinks + top-scored + recent window.

    Independent reference implementation (list-based bookkeeping, explicit
    sorts). With `mean_scores=True` the eviction key becomes the cumulative
    score divided by the number of softmax rows that observed the token.
    """

    def __init__(self, layer: int, head: int, head_dim: int, budget: LayerBudget,
                 mean_scores: bool = False):
        self.layer = layer
        self.head = head
        self.budget = budget
        self.mean_scores = mean_scores
        self.head_dim = head_dim
        self.rows: list[tuple[int, np.ndarray, np.ndarray]] = []  # (origin, k, v)
        self.scores: list[float] = []
        self.counts: list[int] = []
        self.next_origin = 0
        self.ema_threshold = None

    @property
    def origins(self) -> np.ndarray:
        return np.asarray([r[0] for r in self.rows], dtype=np.int64)

    def ingest_prompt(self, q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
        n = k.shape[0]
        attn = causal_softmax((q @ k.T) / math.sqrt(self.head_dim))
        col_sums = attn.sum(axis=0)
        b = self.budget
        if b.effectively_full or b.total >= n:
            keep = list(range(n))
        else:
            middle = list(range(b.sink, n - b.recent))
            top = sorted(sorted(middle, key=lambda i: (-col_sums[i], i))[:b.top])
            keep = list(range(b.sink)) + top + list(range(n - b.recent, n))
        kept = set(keep)
        for i in keep:
            self.rows.append((i, k[i].copy(), v[i].copy()))
            self.scores.append(float(col_sums[i]))
            self.counts.append(n - i)
        self.next_origin = n
        return np.asarray([i for i in range(n) if i not in kept], dtype=np.int64)

    def step(self, q: np.ndarray, k: np.ndarray, v: np.ndarray) -> StepResult:
        self.rows.append((self.next_origin, k.copy(), v.copy()))
        self.scores.append(0.0)
        self.counts.append(0)
        self.next_origin += 1

        keys = np.vstack([r[1] for r in self.rows])
        values = np.vstack([r[2] for r in self.rows])
        weights, output = _attend(q, keys, values)
        for i, w in enumerate(weights):
            self.scores[i] += float(w)
            self.counts[i] += 1
        attended = self.origins

        evicted = np.empty(0, dtype=np.int64)
        b = self.budget
        if not b.effectively_full and len(self.rows) > b.total:
            lo = sum(1 for r in self.rows if r[0] < b.sink)
            hi = len(self.rows) - b.recent
            if hi <= lo:
                raise ContractViolation("no evictable rows between sink and recent segments")

            def rank(i: int) -> tuple[float, int]:
                score = self.scores[i] / self.counts[i] if self.mean_scores else self.scores[i]
                return (score, self.rows[i][0])

            victim = min(range(lo, hi), key=rank)
            evicted = np.asarray([self.rows[victim][0]], dtype=np.int64)
            del self.rows[victim], self.scores[victim], self.counts[victim]
        return StepResult(output, attended, evicted)


class CompressedHead:
    """The two-stage engine: scored eviction plus threshold-gated merging."""

    def __init__(self, layer: int, head: int, head_dim: int, budget: LayerBudget,
                 beta: float, merge_enabled: bool):
        self.layer = layer
        self.head = head
        self.beta = beta
        self.merge_enabled = merge_enabled
        self.state = empty_state(layer, head, budget, head_dim)
        self.prompt_merge_events: list[dict] = []

    @property
    def origins(self) -> np.ndarray:
        return self.state.origin_ids.copy()

    @property
    def ema_threshold(self) -> float | None:
        return self.state.ema_threshold

    def _merge(self, outcome, phase: str) -> list[dict]:
        if not self.merge_enabled or outcome.count == 0:
            return []
        sims = match_nearest(outcome.keys, self.state.keys)
        tau = update_threshold(self.state.ema_threshold, sims, self.beta, phase)
        self.state.ema_threshold = tau
        decision = decide_merges(sims, tau)
        events = [
            {
                "layer": self.layer,
                "head": self.head,
                "origin": int(outcome.origin_ids[i]),
                "max_similarity": float(sims.row_max[i]),
                "threshold": float(tau),
                "decision": "merge" if decision.recalled[i] else "discard",
            }
            for i in range(outcome.count)
        ]
        apply_merge(self.state, outcome, merge_weights(sims, decision))
        return events

    def ingest_prompt(self, q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
        scores = prompt_attention_scores(q, k)
        _, outcome = evict_prompt(self.state, k, v, scores)
        self.prompt_merge_events = self._merge(outcome, PROMPT)
        return outcome.origin_ids

    def step(self, q: np.ndarray, k: np.ndarray, v: np.ndarray) -> StepResult:
        _, outcome, output = step_generation(self.state, q, k, v)
        # The attended set is the post-step cache plus the step's victim.
        attended = np.sort(np.concatenate([self.state.origin_ids, outcome.origin_ids]))
        events = self._merge(outcome, GENERATION)
        return StepResult(
            output=output,
            attended_origins=attended,
            evicted_origins=outcome.origin_ids.copy(),
            merge_events=events,
        )


def make_head(config: CachePolicyConfig, layer: int, head: int, head_dim: int,
              budget: LayerBudget | None):
    policy = config.policy
    if policy == "full":
        return FullHead(layer, head, head_dim)
    if budget is None:
        raise ContractViolation(f"policy {policy!r} requires a resolved budget")
    if policy == "local_window":
        return LocalWindowHead(layer, head, head_dim, size=budget.total)
    if policy == "streaming":
        return StreamingHead(layer, head, head_dim, size=budget.total, sink=budget.sink)
    if policy == "h2o":
        return HeavyHitterHead(layer, head, head_dim, budget, mean_scores=False)
    if policy == "roco":
        return HeavyHitterHead(layer, head, head_dim, budget, mean_scores=True)
    if policy == "d2o":
        return CompressedHead(layer, head, head_dim, budget,
                              beta=config.beta, merge_enabled=config.merge_enabled)
    raise ContractViolation(f"unknown policy {policy!r}")
