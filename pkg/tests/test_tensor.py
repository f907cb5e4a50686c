"""Tests for dense tensors and the truncated SVD."""

import numpy as np
import pytest
from scipy import linalg

from pyLoRAOver.exceptions import BadWildcard, NonFinite, ShapeMismatch, SizeMismatch
from pyLoRAOver.tensor import DenseTensor, frobenius_norm, matmul, reshape, svd_truncated


class TestDenseTensor:
    def test_scalar_becomes_order_one(self):
        t = DenseTensor(3.0)
        assert t.dims == (1,)
        assert t.order == 1

    def test_dims_must_match_data(self):
        with pytest.raises(SizeMismatch):
            DenseTensor(np.arange(6), dims=[4])

    def test_zero_dim_rejected(self):
        with pytest.raises(SizeMismatch):
            DenseTensor(np.zeros((0, 3)))

    def test_values_are_read_only_copies(self):
        source = np.ones((2, 2))
        t = DenseTensor(source)
        source[0, 0] = 5.0
        assert t.array[0, 0] == 1.0
        with pytest.raises(ValueError):
            t.array[0, 0] = 2.0

    def test_data_is_row_major(self):
        t = DenseTensor([[1, 2, 3], [4, 5, 6]])
        assert t.data.tolist() == [1, 2, 3, 4, 5, 6]


class TestReshape:
    def test_reshape_keeps_data(self):
        t = DenseTensor(np.arange(1, 7), dims=[2, 3])
        r = reshape(t, [3, 2])
        assert r.dims == (3, 2)
        assert r.data.tolist() == [1, 2, 3, 4, 5, 6]

    def test_reshape_to_order_three(self):
        t = DenseTensor(np.arange(16.0).reshape(4, 4))
        assert reshape(t, [2, 2, 4]).dims == (2, 2, 4)

    def test_wildcard(self):
        t = DenseTensor(np.arange(12.0))
        assert reshape(t, [3, -1]).dims == (3, 4)

    def test_size_mismatch(self):
        with pytest.raises(SizeMismatch):
            reshape(DenseTensor(np.arange(6.0)), [4])

    @pytest.mark.parametrize('dims', [[-1, -1], [5, -1]])
    def test_bad_wildcard(self, dims):
        with pytest.raises(BadWildcard):
            reshape(DenseTensor(np.arange(12.0)), dims)

    def test_round_trip_is_bit_exact(self, rng):
        t = DenseTensor(rng.normal(size=(3, 4, 5)))
        assert reshape(reshape(t, [12, 5]), t.dims) == t


class TestMatmul:
    def test_identity(self, rng):
        m = DenseTensor(rng.normal(size=(2, 5)))
        assert matmul(DenseTensor.identity(2), m) == m

    def test_hand_case(self):
        result = matmul(DenseTensor([[1, 2], [3, 4]]), DenseTensor([[5], [6]]))
        assert result.array.tolist() == [[17.0], [39.0]]

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            matmul(DenseTensor(np.ones((2, 3))), DenseTensor(np.ones((2, 3))))


class TestFrobeniusNorm:
    def test_zero(self):
        assert frobenius_norm(DenseTensor.zeros([3, 3])) == 0.0

    def test_three_four_five(self):
        assert frobenius_norm(DenseTensor([[3, 4]])) == pytest.approx(5.0)

    def test_identity(self):
        assert frobenius_norm(DenseTensor.identity(4)) == pytest.approx(2.0)


class TestSvdTruncated:
    def test_diagonal_full(self):
        result = svd_truncated(DenseTensor(np.diag([3.0, 1.0])), 2)
        assert result.sigma.tolist() == pytest.approx([3.0, 1.0])
        assert result.discarded_energy == pytest.approx(0.0, abs=1e-24)

    def test_diagonal_truncated(self):
        result = svd_truncated(DenseTensor(np.diag([3.0, 1.0])), 1)
        assert result.sigma.tolist() == pytest.approx([3.0])
        assert result.discarded_energy == pytest.approx(1.0)

    def test_rank_one(self, rng):
        u = rng.normal(size=5)
        u *= 2.0 / np.linalg.norm(u)
        v = rng.normal(size=4)
        v /= np.linalg.norm(v)
        result = svd_truncated(DenseTensor(np.outer(u, v)), 1)
        assert result.sigma[0] == pytest.approx(2.0, rel=1e-12)
        assert result.discarded_energy <= 1e-18

    @pytest.mark.parametrize('shape', [(7, 3), (3, 7), (6, 6), (1, 5), (5, 1), (40, 12)])
    def test_matches_scipy_singular_values(self, rng, shape):
        m = rng.normal(size=shape)
        result = svd_truncated(DenseTensor(m), min(shape))
        np.testing.assert_allclose(result.sigma, linalg.svd(m, compute_uv=False), rtol=1e-10, atol=1e-12)

    def test_reconstruction_and_orthonormality(self, rng):
        for _ in range(200):
            rows, cols = rng.integers(1, 65, size=2)
            m = rng.normal(size=(rows, cols))
            k = min(rows, cols)
            result = svd_truncated(DenseTensor(m), k)
            rec = result.reconstruct().array
            assert np.linalg.norm(m - rec) <= 1e-9 * np.linalg.norm(m)
            np.testing.assert_allclose(result.u.array.T @ result.u.array, np.eye(k), atol=1e-10)
            np.testing.assert_allclose(result.vt.array @ result.vt.array.T, np.eye(k), atol=1e-10)
            assert np.all(np.diff(result.sigma) <= 0)

    def test_eckart_young(self, rng):
        for _ in range(20):
            m = rng.normal(size=(12, 9))
            k = int(rng.integers(1, 9))
            result = svd_truncated(DenseTensor(m), k)
            error2 = np.linalg.norm(m - result.reconstruct().array) ** 2
            assert error2 == pytest.approx(result.discarded_energy, rel=1e-8)

    def test_sign_convention(self, rng):
        m = rng.normal(size=(6, 4))
        a = svd_truncated(DenseTensor(m), 4)
        b = svd_truncated(DenseTensor(m), 4)
        assert a.u == b.u
        for k in range(4):
            col = a.u.array[:, k]
            first = col[np.flatnonzero(np.abs(col) > 1e-14)[0]]
            assert first > 0

    def test_rank_deficient_has_orthonormal_basis(self):
        m = np.zeros((4, 3))
        m[0, 0] = 2.0
        result = svd_truncated(DenseTensor(m), 3)
        assert result.sigma.tolist() == pytest.approx([2.0, 0.0, 0.0])
        np.testing.assert_allclose(result.u.array.T @ result.u.array, np.eye(3), atol=1e-10)

    def test_non_finite(self):
        with pytest.raises(NonFinite):
            svd_truncated(DenseTensor([[1.0, np.nan], [0.0, 1.0]]), 1)

    @pytest.mark.parametrize('keep', [0, 3])
    def test_bad_keep(self, keep):
        with pytest.raises(ShapeMismatch):
            svd_truncated(DenseTensor(np.eye(2)), keep)
