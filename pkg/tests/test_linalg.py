import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multilora.errors import DomainError, ShapeError, ValidationError
from multilora.linalg import (
    LoraLayerDelta,
    as_matrix,
    lora_delta_apply,
    lora_forward,
    lora_forward_rows,
    matmul,
    matvec,
)

from conftest import assert_bitwise, random_delta


def triple_loop(lhs, rhs):
    lhs = np.asarray(lhs, dtype=np.float64)
    rhs = np.asarray(rhs, dtype=np.float64)
    out = [[0.0] * rhs.shape[1] for _ in range(lhs.shape[0])]
    for i in range(lhs.shape[0]):
        for j in range(rhs.shape[1]):
            s = 0.0
            for k in range(lhs.shape[1]):
                s += float(lhs[i, k]) * float(rhs[k, j])
            out[i][j] = s
    return np.array(out)


def dense_oracle(x, w, delta):
    """``(W + (alpha/rank) B A) x`` with ``B A`` materialised, all in float64."""
    w64 = np.asarray(w, dtype=np.float64)
    ba = delta.b.astype(np.float64) @ delta.a.astype(np.float64)
    return (w64 + (delta.alpha / delta.rank) * ba) @ np.asarray(x, dtype=np.float64)


class TestMatrix:
    def test_rejects_nan_and_inf(self):
        with pytest.raises(ValidationError):
            as_matrix([[1.0, np.nan]])
        with pytest.raises(ValidationError):
            as_matrix([[np.inf]])
        with pytest.raises(ValidationError):
            as_matrix([[1e39]])  # overflows float32

    def test_rejects_wrong_rank(self):
        with pytest.raises(ShapeError):
            as_matrix([1.0, 2.0])

    def test_is_read_only_copy(self):
        src = np.ones((2, 2))
        m = as_matrix(src)
        src[0, 0] = 5
        assert m[0, 0] == 1 and m.dtype == np.float32
        with pytest.raises(ValueError):
            m[0, 0] = 3


class TestMatmul:
    def test_identity(self):
        assert_bitwise(matmul([[1, 0], [0, 1]], [[3], [4]]), np.array([[3], [4]], np.float32))

    def test_zero_annihilates(self):
        rhs = np.random.default_rng(0).uniform(-1, 1, (2, 5))
        assert_bitwise(matmul(np.zeros((2, 2)), rhs), np.zeros((2, 5), np.float32))

    def test_small_product_against_triple_loop(self):
        expected = triple_loop([[1, 2], [3, 4]], [[5], [6]])
        np.testing.assert_array_equal(expected, [[17.0], [39.0]])
        np.testing.assert_array_equal(matmul([[1, 2], [3, 4]], [[5], [6]]), expected)

    @pytest.mark.parametrize("seed", range(5))
    def test_random_matches_triple_loop_rounded(self, seed):
        # sequential float64 accumulation then one rounding: matches the oracle exactly
        rng = np.random.default_rng(seed)
        lhs = rng.uniform(-1, 1, (4, 7)).astype(np.float32)
        rhs = rng.uniform(-1, 1, (7, 3)).astype(np.float32)
        assert_bitwise(matmul(lhs, rhs), triple_loop(lhs, rhs).astype(np.float32))

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            matmul(np.zeros((2, 3)), np.zeros((2, 2)))

    @pytest.mark.parametrize("seed", range(10))
    def test_associativity_within_tolerance(self, seed):
        rng = np.random.default_rng(seed)
        a, b, c = (rng.uniform(-1, 1, (8, 8)) for _ in range(3))
        left = matmul(matmul(a, b), c)
        right = matmul(a, matmul(b, c))
        assert np.max(np.abs(left.astype(np.float64) - right)) <= 1e-4

    def test_matvec_agrees_with_row_batches(self):
        rng = np.random.default_rng(3)
        w = rng.uniform(-1, 1, (5, 9)).astype(np.float32)
        xs = rng.uniform(-1, 1, (6, 9)).astype(np.float32)
        batched = lora_forward_rows(xs, w, None)
        for i in range(6):
            assert_bitwise(batched[i], matvec(w, xs[i]))


class TestDelta:
    def test_validation(self):
        with pytest.raises(DomainError):
            LoraLayerDelta(np.ones((3, 2)), np.ones((2, 3)), 1.0)  # rank 3 > min(2, 2)
        with pytest.raises(ShapeError):
            LoraLayerDelta(np.ones((1, 2)), np.ones((2, 2)), 1.0)
        with pytest.raises(DomainError):
            LoraLayerDelta(np.ones((1, 2)), np.ones((2, 1)), 0.0)
        with pytest.raises(ValidationError):
            LoraLayerDelta(np.full((1, 2), np.nan), np.ones((2, 1)), 1.0)

    def test_scale_is_alpha_over_rank(self):
        d = LoraLayerDelta(np.ones((2, 4)), np.ones((3, 2)), 3.0)
        assert d.rank == 2 and d.scale == 1.5 and (d.d_out, d.d_in) == (3, 4)

    def test_zero_b_gives_exact_zeros(self):
        a = np.random.default_rng(1).uniform(-1, 1, (2, 3))
        d = LoraLayerDelta(a, np.zeros((3, 2)), 1.0)
        out = lora_delta_apply([1, 2, 3], d)
        assert_bitwise(out, np.zeros(3, np.float32))

    def test_rank_one_example(self):
        d = LoraLayerDelta([[1, 0]], [[2], [0]], 1.0)
        oracle = dense_oracle([3, 4], np.zeros((2, 2)), d)
        np.testing.assert_array_equal(oracle, [6.0, 0.0])
        np.testing.assert_array_equal(lora_delta_apply([3, 4], d), oracle)

    def test_rank_one_example_alpha_two(self):
        d = LoraLayerDelta([[1, 0]], [[2], [0]], 2.0)
        oracle = dense_oracle([3, 4], np.zeros((2, 2)), d)
        np.testing.assert_array_equal(oracle, [12.0, 0.0])
        np.testing.assert_array_equal(lora_delta_apply([3, 4], d), oracle)

    def test_shape_mismatch(self):
        d = LoraLayerDelta([[1, 0]], [[2], [0]], 1.0)
        with pytest.raises(ShapeError):
            lora_delta_apply([1, 2, 3], d)

    @given(st.integers(0, 2**32 - 1), st.floats(0.01, 100))
    @settings(max_examples=60, deadline=None)
    def test_linear_in_alpha(self, seed, c):
        rng = np.random.default_rng(seed)
        d1 = random_delta(rng, 6, 5, 3, alpha=c)
        d2 = LoraLayerDelta(d1.a, d1.b, 2 * d1.alpha, d1.rank)
        x = rng.uniform(-1, 1, 5)
        once = lora_delta_apply(x, d1).astype(np.float64)
        twice = lora_delta_apply(x, d2).astype(np.float64)
        assert np.all(np.abs(twice - 2 * once) <= 1e-6 * np.maximum(np.abs(twice), 1e-30))


class TestForward:
    def test_zero_b_identity_bitwise(self):
        d = LoraLayerDelta([[1, 0]], [[0], [0]], 1.0)
        assert_bitwise(lora_forward([3, 4], np.eye(2), d), np.array([3, 4], np.float32))

    def test_example(self):
        d = LoraLayerDelta([[1, 0]], [[2], [0]], 1.0)
        oracle = dense_oracle([3, 4], np.eye(2), d)
        np.testing.assert_array_equal(oracle, [9.0, 4.0])
        np.testing.assert_array_equal(lora_forward([3, 4], np.eye(2), d), oracle)

    def test_ones_matrix_zero_delta(self):
        d = LoraLayerDelta([[1, 0]], [[0], [0]], 1.0)
        assert_bitwise(lora_forward([1, 1], np.ones((2, 2)), d), np.array([2, 2], np.float32))

    def test_shape_mismatch(self):
        d = LoraLayerDelta([[1, 0, 0]], [[0], [0]], 1.0)
        with pytest.raises(ShapeError):
            lora_forward([1, 1], np.ones((2, 2)), d)

    @given(
        st.integers(0, 2**32 - 1),
        st.integers(1, 32),
        st.integers(1, 32),
        st.integers(1, 4),
    )
    @settings(max_examples=100, deadline=None)
    def test_matches_dense_oracle(self, seed, d_in, d_out, rank):
        rank = min(rank, d_in, d_out)
        rng = np.random.default_rng(seed)
        w = rng.uniform(-1, 1, (d_out, d_in)).astype(np.float32)
        delta = random_delta(rng, d_out, d_in, rank)
        x = rng.uniform(-1, 1, d_in).astype(np.float32)
        got = lora_forward(x, w, delta).astype(np.float64)
        assert np.max(np.abs(got - dense_oracle(x, w, delta))) <= 1e-5

    @given(st.integers(0, 2**32 - 1), st.integers(1, 16), st.integers(1, 16))
    @settings(max_examples=50, deadline=None)
    def test_zero_b_is_base_bitwise(self, seed, d_in, d_out):
        rng = np.random.default_rng(seed)
        w = rng.uniform(-1, 1, (d_out, d_in)).astype(np.float32)
        delta = random_delta(rng, d_out, d_in, 1, zero_b=True)
        x = rng.uniform(-1, 1, d_in)
        assert_bitwise(lora_forward(x, w, delta), matvec(w, x))
