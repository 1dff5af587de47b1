from __future__ import annotations

import math

import numpy as np
import pytest

from kvreplay.errors import ContractViolation
from kvreplay.eviction import (
    empty_state,
    evict_prompt,
    init_prompt_scores,
    step_generation,
)
from kvreplay.layers import LayerBudget
from kvreplay.trace import AttentionTrace, generate_synthetic


def budget(total, sink, top, recent, full=False, layer=0):
    return LayerBudget(layer=layer, total=total, sink=sink, top=top, recent=recent,
                       effectively_full=full)


def oracle_conserved(scores, sink, top, recent):
    """Brute-force sort-and-take selection of the conserved prompt set."""
    n = len(scores)
    middle = list(range(sink, n - recent))
    ranked = sorted(middle, key=lambda i: (-scores[i], i))
    return sorted(set(range(sink)) | set(ranked[:top]) | set(range(n - recent, n)))


def all_to_first_trace():
    """3-token prompt where every row attends (almost) fully to token 0."""
    d = 4
    big = 40.0
    k = np.zeros((4, d))
    k[0, 0] = big
    q = np.zeros((4, d))
    q[:, 0] = big
    v = np.ones((4, d))
    return AttentionTrace(
        model_name="hand", num_layers=1, num_heads=1, head_dim=d,
        prompt_len=3, total_len=4,
        q=q[None, None], k=k[None, None], v=v[None, None],
    )


def test_prompt_scores_single_token():
    t = generate_synthetic(0, layers=1, heads=1, head_dim=4, prompt_len=1, gen_len=1)
    assert init_prompt_scores(t, 0, 0) == pytest.approx([1.0])


def test_prompt_scores_total_mass():
    t = generate_synthetic(1, layers=2, heads=2, head_dim=8, prompt_len=24, gen_len=2)
    for layer in range(2):
        for head in range(2):
            scores = init_prompt_scores(t, layer, head)
            assert scores.sum() == pytest.approx(t.prompt_len, abs=1e-9)


def test_prompt_scores_all_to_first_matches_bruteforce():
    t = all_to_first_trace()
    scores = init_prompt_scores(t, 0, 0)
    assert scores[0] == pytest.approx(3.0, abs=1e-6)
    assert scores[1] == pytest.approx(0.0, abs=1e-6)
    # brute-force oracle: materialize the masked softmax and sum columns
    q, k = t.q[0, 0, :3], t.k[0, 0, :3]
    logits = q @ k.T / math.sqrt(4)
    expected = np.zeros(3)
    for i in range(3):
        row = np.exp(logits[i, :i + 1] - logits[i, :i + 1].max())
        row /= row.sum()
        expected[:i + 1] += row
    assert scores == pytest.approx(expected, abs=1e-12)


def test_evict_prompt_full_budget_identity():
    rng = np.random.default_rng(0)
    k, v = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    scores = rng.uniform(size=6)
    state = empty_state(0, 0, budget(10, 1, 7, 2), 4)
    state, outcome = evict_prompt(state, k, v, scores)
    assert outcome.count == 0
    assert np.array_equal(state.keys, k)
    assert state.origin_ids.tolist() == list(range(6))


def test_evict_prompt_hand_example():
    # L=8, sinks=1, top=2, recent=2; middle scores (5,1,4,9,2) at positions 1..5.
    scores = np.array([99.0, 5.0, 1.0, 4.0, 9.0, 2.0, 0.1, 0.2])
    rng = np.random.default_rng(1)
    k, v = rng.normal(size=(8, 4)), rng.normal(size=(8, 4))
    state = empty_state(0, 0, budget(5, 1, 2, 2), 4)
    state, outcome = evict_prompt(state, k, v, scores)
    assert state.origin_ids.tolist() == [0, 1, 4, 6, 7]
    assert outcome.origin_ids.tolist() == [2, 3, 5]
    assert np.array_equal(state.keys, k[[0, 1, 4, 6, 7]])
    assert state.attn_score.tolist() == scores[[0, 1, 4, 6, 7]].tolist()


def test_evict_prompt_tie_breaks_to_lower_index():
    scores = np.array([9.0, 3.0, 3.0, 3.0, 1.0, 1.0])
    rng = np.random.default_rng(2)
    k, v = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    state = empty_state(0, 0, budget(4, 1, 1, 2), 4)
    state, _ = evict_prompt(state, k, v, scores)
    assert state.origin_ids.tolist() == [0, 1, 4, 5]


def test_evict_prompt_requires_empty_state():
    rng = np.random.default_rng(3)
    k, v = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    scores = rng.uniform(size=6)
    state = empty_state(0, 0, budget(4, 1, 1, 2), 4)
    state, _ = evict_prompt(state, k, v, scores)
    with pytest.raises(ContractViolation):
        evict_prompt(state, k, v, scores)


def test_evict_prompt_matches_oracle_on_random_instances():
    rng = np.random.default_rng(4)
    for _ in range(200):
        n = int(rng.integers(8, 65))
        sink = int(rng.integers(0, 4))
        recent = int(rng.integers(1, 5))
        top = int(rng.integers(1, max(2, n - sink - recent - 1)))
        total = sink + top + recent
        if total >= n:
            continue
        scores = rng.uniform(size=n)
        k = rng.normal(size=(n, 4))
        state = empty_state(0, 0, budget(total, sink, top, recent), 4)
        state, outcome = evict_prompt(state, k, k.copy(), scores)
        assert state.origin_ids.tolist() == oracle_conserved(scores, sink, top, recent)
        assert set(outcome.origin_ids) & set(state.origin_ids) == set()
        assert outcome.count + state.size == n


def run_prompt(state, trace, layer=0, head=0):
    p = trace.prompt_len
    scores = init_prompt_scores(trace, layer, head)
    return evict_prompt(state, trace.k[layer, head, :p], trace.v[layer, head, :p], scores)


def test_step_below_budget_grows():
    t = generate_synthetic(5, layers=1, heads=1, head_dim=8, prompt_len=10, gen_len=4)
    state = empty_state(0, 0, budget(12, 2, 7, 3), 8)
    state, _ = run_prompt(state, t)
    assert state.size == 10
    state, outcome, _ = step_generation(state, t.q[0, 0, 10], t.k[0, 0, 10], t.v[0, 0, 10])
    assert outcome.count == 0
    assert state.size == 11


def test_step_at_budget_evicts_exactly_one():
    t = generate_synthetic(6, layers=1, heads=1, head_dim=8, prompt_len=20, gen_len=8)
    state = empty_state(0, 0, budget(10, 2, 5, 3), 8)
    state, _ = run_prompt(state, t)
    assert state.size == 10
    for i in range(20, 28):
        state, outcome, _ = step_generation(state, t.q[0, 0, i], t.k[0, 0, i], t.v[0, 0, i])
        assert outcome.count == 1
        assert state.size == 10
        state.check_invariants()


def test_step_eviction_picks_lowest_score_outside_protected():
    state = empty_state(0, 0, budget(4, 1, 1, 2), 2)
    k = np.eye(4, 2)
    state, _ = evict_prompt(state, k, k.copy(), np.array([9.0, 2.0, 3.0, 1.0]))
    assert state.size == 4
    # After the step the cache is 5 rows: sink 0 and recent window (rows 3, 4)
    # are protected; rows 1 and 2 are candidates and row 1 has the lower score.
    state, outcome, _ = step_generation(state, np.ones(2), np.ones(2), np.ones(2))
    assert outcome.origin_ids.tolist() == [1]


def test_sink_and_recent_immortality():
    t = generate_synthetic(7, layers=1, heads=1, head_dim=8, prompt_len=30, gen_len=20)
    sink, recent = 3, 4
    state = empty_state(0, 0, budget(12, sink, 5, recent), 8)
    state, _ = run_prompt(state, t)
    for i in range(30, 50):
        state, outcome, _ = step_generation(state, t.q[0, 0, i], t.k[0, 0, i], t.v[0, 0, i])
        assert set(range(sink)) <= set(state.origin_ids.tolist())
        if outcome.count:
            # The `recent` most recently appended tokens (i - recent + 1 .. i)
            # are protected at this step.
            assert outcome.origin_ids[0] <= i - recent
        state.check_invariants()


def test_scores_monotone_nondecreasing():
    t = generate_synthetic(8, layers=1, heads=1, head_dim=8, prompt_len=16, gen_len=10)
    state = empty_state(0, 0, budget(10, 2, 5, 3), 8)
    state, _ = run_prompt(state, t)
    previous = dict(zip(state.origin_ids.tolist(), state.attn_score.tolist()))
    for i in range(16, 26):
        state, _, _ = step_generation(state, t.q[0, 0, i], t.k[0, 0, i], t.v[0, 0, i])
        current = dict(zip(state.origin_ids.tolist(), state.attn_score.tolist()))
        for origin, score in current.items():
            if origin in previous:
                assert score >= previous[origin] - 1e-15
        previous = current


def full_attention_outputs(trace, layer, head):
    """Independent full-cache oracle: causal attention rows for the whole
    sequence, restricted to the generation region."""
    q = trace.q[layer, head]
    k = trace.k[layer, head]
    v = trace.v[layer, head]
    outs = []
    for i in range(trace.prompt_len, trace.total_len):
        logits = (k[:i + 1] @ q[i]) / math.sqrt(trace.head_dim)
        w = np.exp(logits - logits.max())
        w /= w.sum()
        outs.append(w @ v[:i + 1])
    return outs


def test_full_budget_transparency_against_oracle():
    t = generate_synthetic(9, layers=2, heads=2, head_dim=8, prompt_len=24, gen_len=12)
    for layer in range(2):
        for head in range(2):
            b = budget(t.total_len, 2, t.total_len - 5, 3, full=True)
            state = empty_state(layer, head, b, 8)
            state, _ = run_prompt(state, t, layer, head)
            expected = full_attention_outputs(t, layer, head)
            for step, i in enumerate(range(24, 36)):
                state, outcome, out = step_generation(
                    state, t.q[layer, head, i], t.k[layer, head, i], t.v[layer, head, i])
                assert outcome.count == 0
                assert np.linalg.norm(out - expected[step]) <= 1e-9


def test_step_requires_initialized_state():
    state = empty_state(0, 0, budget(4, 1, 1, 2), 2)
    with pytest.raises(ContractViolation):
        step_generation(state, np.ones(2), np.ones(2), np.ones(2))
