from __future__ import annotations

import math

import numpy as np
import pytest

from kvreplay.errors import ContractViolation
from kvreplay.linalg import (
    causal_softmax,
    column_sum_variance,
    cosine_similarity,
    cosine_similarity_matrix,
    matmul,
)


def naive_matmul(a, b):
    rows, inner, cols = a.shape[0], a.shape[1], b.shape[1]
    out = np.zeros((rows, cols))
    for i in range(rows):
        for j in range(cols):
            acc = 0.0
            for k in range(inner):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


def test_matmul_identity_left():
    rng = np.random.default_rng(0)
    for _ in range(5):
        a = rng.normal(size=(2, 2))
        assert np.allclose(matmul(np.eye(2), a), a)


def test_matmul_identity_right():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(a, np.eye(2)), a)


def test_matmul_hand_example():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[5.0, 6.0], [7.0, 8.0]])
    assert np.array_equal(matmul(a, b), np.array([[19.0, 22.0], [43.0, 50.0]]))


def test_matmul_dimension_mismatch():
    with pytest.raises(ContractViolation):
        matmul(np.ones((2, 3)), np.ones((2, 2)))


def test_matmul_matches_naive_oracle():
    rng = np.random.default_rng(1)
    for _ in range(10):
        a = rng.normal(size=(8, 8))
        b = rng.normal(size=(8, 8))
        assert np.allclose(matmul(a, b), naive_matmul(a, b), atol=1e-9)


def test_matmul_rejects_nonfinite():
    bad = np.array([[np.nan, 0.0], [0.0, 1.0]])
    with pytest.raises(ContractViolation):
        matmul(bad, np.eye(2))


def test_causal_softmax_single_token():
    for x in (-3.0, 0.0, 17.5):
        assert causal_softmax(np.array([[x]]))[0, 0] == pytest.approx(1.0)


def test_causal_softmax_uniform_logits():
    out = causal_softmax(np.zeros((2, 2)))
    assert np.array_equal(out[0], [1.0, 0.0])
    assert out[1] == pytest.approx([0.5, 0.5])


def test_causal_softmax_generation_row():
    out = causal_softmax(np.array([[0.0, math.log(3.0)]]))
    assert out[0] == pytest.approx([0.25, 0.75])


def test_causal_softmax_rows_sum_to_one_and_mask_exact():
    rng = np.random.default_rng(2)
    scores = rng.normal(size=(9, 9)) * 5
    out = causal_softmax(scores)
    sums = out.sum(axis=1)
    assert np.all(np.abs(sums - 1.0) <= 1e-12)
    for i in range(9):
        assert np.all(out[i, i + 1:] == 0.0)


def test_causal_softmax_empty_is_error():
    with pytest.raises(ContractViolation):
        causal_softmax(np.empty((0, 0)))


def test_causal_softmax_non_square_is_error():
    with pytest.raises(ContractViolation):
        causal_softmax(np.zeros((3, 5)))


def test_cosine_self_similarity():
    rng = np.random.default_rng(3)
    for _ in range(5):
        v = rng.normal(size=6)
        assert cosine_similarity(v, v) == pytest.approx(1.0, abs=1e-12)


def test_cosine_orthogonal():
    assert cosine_similarity([1.0, 0.0], [0.0, 1.0]) == 0.0


def test_cosine_hand_example():
    assert cosine_similarity([1.0, 1.0], [1.0, 0.0]) == pytest.approx(1 / math.sqrt(2), abs=1e-6)


def test_cosine_zero_vector_returns_zero():
    assert cosine_similarity([0.0, 0.0], [1.0, 2.0]) == 0.0
    assert cosine_similarity([1e-13, 0.0], [1.0, 2.0]) == 0.0


def test_cosine_symmetric_and_scale_invariant():
    rng = np.random.default_rng(4)
    for _ in range(20):
        a = rng.normal(size=5)
        b = rng.normal(size=5)
        lam = float(rng.uniform(0.1, 10.0))
        assert cosine_similarity(a, b) == pytest.approx(cosine_similarity(b, a), abs=1e-12)
        assert cosine_similarity(lam * a, b) == pytest.approx(cosine_similarity(a, b), abs=1e-9)


def test_cosine_matrix_agrees_with_scalar():
    rng = np.random.default_rng(5)
    rows = rng.normal(size=(4, 7))
    cols = rng.normal(size=(6, 7))
    sims = cosine_similarity_matrix(rows, cols)
    for i in range(4):
        for j in range(6):
            assert sims[i, j] == pytest.approx(cosine_similarity(rows[i], cols[j]), abs=1e-12)


def test_cosine_matrix_zero_rows():
    rows = np.array([[0.0, 0.0], [1.0, 0.0]])
    cols = np.array([[1.0, 1.0]])
    sims = cosine_similarity_matrix(rows, cols)
    assert sims[0, 0] == 0.0
    assert sims[1, 0] == pytest.approx(1 / math.sqrt(2))


def test_column_sum_variance_single_column():
    assert column_sum_variance(np.array([[1.0], [2.0], [0.5]])) == 0.0


def test_column_sum_variance_hand_example():
    # Column sums {2, 1, 0}: mean 1, population variance 2/3.
    assert column_sum_variance(np.array([[2.0, 1.0, 0.0]])) == pytest.approx(2 / 3)


def test_column_sum_variance_uniform_attention():
    assert column_sum_variance(np.full((4, 4), 0.25)) == pytest.approx(0.0, abs=1e-15)


def test_column_sum_variance_permutation_invariant():
    rng = np.random.default_rng(6)
    a = rng.uniform(size=(5, 7))
    perm = rng.permutation(7)
    assert column_sum_variance(a) == pytest.approx(column_sum_variance(a[:, perm]), abs=1e-12)


def test_column_sum_variance_empty_is_error():
    with pytest.raises(ContractViolation):
        column_sum_variance(np.empty((3, 0)))
