import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blockspec.kernels import argmax_tiebreak_low, gelu, masked_softmax_rows, matmul, rmsnorm


def naive_matmul(a, b):
    """Triple-loop oracle, written independently of the kernel."""
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        m = np.arange(6, dtype=float).reshape(2, 3)
        assert np.array_equal(matmul(np.eye(2), m), m)

    def test_hand_case(self):
        out = matmul([[1.0, 2.0]], [[3.0], [4.0]])
        assert out.shape == (1, 1) and out[0, 0] == 11.0

    def test_matches_naive_oracle(self):
        rng = np.random.Generator(np.random.PCG64(0))
        a = rng.normal(size=(5, 7))
        b = rng.normal(size=(7, 3))
        assert np.max(np.abs(matmul(a, b) - naive_matmul(a, b))) < 1e-12

    @given(st.integers(1, 16), st.integers(1, 16), st.integers(1, 16), st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_matches_oracle_random_shapes(self, m, k, n, seed):
        rng = np.random.Generator(np.random.PCG64(seed))
        a = rng.normal(size=(m, k))
        b = rng.normal(size=(k, n))
        assert np.max(np.abs(matmul(a, b) - naive_matmul(a, b))) < 1e-12

    def test_row_independence_bitwise(self):
        # appending rows to `a` must not change existing rows' results
        rng = np.random.Generator(np.random.PCG64(1))
        a = rng.normal(size=(4, 9))
        b = rng.normal(size=(9, 5))
        small = matmul(a, b)
        big = matmul(np.vstack([a, rng.normal(size=(3, 9))]), b)
        assert np.array_equal(small, big[:4])

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_deterministic(self):
        rng = np.random.Generator(np.random.PCG64(2))
        a = rng.normal(size=(8, 8))
        b = rng.normal(size=(8, 8))
        assert np.array_equal(matmul(a, b), matmul(a, b))


class TestMaskedSoftmax:
    def test_symmetric_pair(self):
        out = masked_softmax_rows([[0.0, 0.0]], [[True, True]])
        assert np.allclose(out, [[0.5, 0.5]])

    def test_forced_single_entry(self):
        out = masked_softmax_rows([[5.0, 100.0]], [[True, False]])
        assert out[0, 0] == 1.0 and out[0, 1] == 0.0

    def test_matches_direct_formula(self):
        s = np.array([[1.0, 2.0, 3.0]])
        direct = np.exp(s) / np.exp(s).sum()
        assert np.max(np.abs(masked_softmax_rows(s, np.ones_like(s, bool)) - direct)) < 1e-12

    def test_fully_masked_row_errors(self):
        with pytest.raises(ValueError, match="fully masked"):
            masked_softmax_rows([[1.0, 2.0]], [[False, False]])

    @given(st.integers(0, 2**32 - 1), st.integers(2, 9), st.integers(1, 6))
    @settings(max_examples=40, deadline=None)
    def test_row_sums_and_exact_zeros(self, seed, cols, rows):
        rng = np.random.Generator(np.random.PCG64(seed))
        s = rng.normal(size=(rows, cols)) * 10
        vis = rng.uniform(size=(rows, cols)) > 0.4
        vis[np.arange(rows), rng.integers(0, cols, size=rows)] = True  # no empty rows
        out = masked_softmax_rows(s, vis)
        assert np.all(out[~vis] == 0.0)
        assert np.max(np.abs(out.sum(axis=1) - 1.0)) < 1e-12


class TestRmsnorm:
    def test_zero_row(self):
        assert np.array_equal(rmsnorm([0.0, 0.0, 0.0], [1.0, 1.0, 1.0], 1e-6), np.zeros(3))

    def test_hand_value(self):
        out = rmsnorm([3.0, 4.0], [1.0, 1.0], 1e-30)
        expect = np.array([3.0, 4.0]) / np.sqrt(12.5)
        assert np.max(np.abs(out - expect)) < 1e-12

    def test_scale_invariance_limit(self):
        row = np.array([0.3, -1.2, 2.2, 0.9])
        gain = np.array([1.1, 0.9, 1.0, 1.3])
        a = rmsnorm(row, gain, 1e-300)
        b = rmsnorm(137.0 * row, gain, 1e-300)
        assert np.max(np.abs(a - b)) < 1e-12

    def test_eps_required_positive(self):
        with pytest.raises(ValueError):
            rmsnorm([1.0], [1.0], 0.0)


class TestArgmax:
    @pytest.mark.parametrize(
        "v,expect",
        [([0.2, 0.9, 0.9], 1), ([1.0], 0), ([-1.0, -2.0], 0), ([5, 5, 5], 0)],
    )
    def test_tie_break_low(self, v, expect):
        assert argmax_tiebreak_low(v) == expect

    def test_empty_errors(self):
        with pytest.raises(ValueError):
            argmax_tiebreak_low([])


def test_gelu_fixed_points():
    out = gelu(np.array([[0.0, 100.0, -100.0]]))
    assert out[0, 0] == 0.0
    assert abs(out[0, 1] - 100.0) < 1e-9
    assert abs(out[0, 2]) < 1e-9
