"""Tests for the structured positive-definite kernel.

Frozen gradient values: with the identity kernel (s = 0, t = 0) and the
trace loss L = <I, W>, the chain rule collapses to d_skew = 0 and
d_diag = 4/pi per channel (the diagonal map's slope at zero).
"""

import numpy as np
import pytest

from lcv.cayley import DiagParams, SkewParams, lambda_from_t, unpack_skew
from lcv.kernel import (
    KernelGradient,
    SPDKernel,
    assemble_kernel,
    identity_kernel,
    kernel_factor_grads,
    kernel_grad,
    load_kernel,
    param_count,
    save_kernel,
    whitening_pca,
    whitening_zca,
)


def random_kernel(rng, dim, scale=1.0):
    s = SkewParams(entries=rng.uniform(-scale, scale, dim * (dim - 1) // 2), dim=dim)
    t = DiagParams(t=rng.uniform(-scale, scale, dim))
    return assemble_kernel(s, t)


class TestAssembly:
    def test_identity_kernel_is_exact(self):
        k = identity_kernel(3)
        np.testing.assert_array_equal(k.W, np.eye(3))
        np.testing.assert_array_equal(k.P.values, np.eye(3))
        np.testing.assert_array_equal(k.lam, np.ones(3))

    def test_pure_diagonal(self):
        # s = 0 keeps P = I, so W is just the mapped eigenvalues.
        k = assemble_kernel(
            SkewParams(entries=np.zeros(1), dim=2),
            DiagParams(t=np.array([1.0, 0.0])),
        )
        np.testing.assert_allclose(k.W, np.diag([3.0, 1.0]), atol=1e-15)

    def test_factorization_holds(self):
        rng = np.random.default_rng(5)
        for dim in (2, 4, 16):
            k = random_kernel(rng, dim, scale=2.0)
            W_rebuilt = k.P.values.T @ np.diag(k.lam) @ k.P.values
            np.testing.assert_allclose(k.W, W_rebuilt, atol=1e-12)
            np.testing.assert_allclose(k.W, k.W.T, atol=1e-15)

    def test_always_positive_definite(self):
        rng = np.random.default_rng(23)
        for _ in range(20):
            k = random_kernel(rng, 8, scale=4.0)
            assert np.linalg.eigvalsh(k.W).min() > 0

    def test_eigenvalues_match_diag_map(self):
        rng = np.random.default_rng(31)
        t = rng.uniform(-2, 2, 6)
        k = assemble_kernel(SkewParams(entries=rng.uniform(-1, 1, 15), dim=6), DiagParams(t=t))
        np.testing.assert_allclose(
            np.sort(np.linalg.eigvalsh(k.W)), np.sort(lambda_from_t(t)), atol=1e-10
        )

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError):
            assemble_kernel(SkewParams(entries=np.zeros(1), dim=2), DiagParams(t=np.zeros(3)))

    def test_inconsistent_kernel_rejected(self):
        k = identity_kernel(2)
        with pytest.raises(ValueError):
            SPDKernel(
                W=np.diag([2.0, 1.0]),
                P=k.P,
                lam=k.lam,
                skew_params=k.skew_params,
                diag_params=k.diag_params,
            )


class TestWhitening:
    def test_pca_factor_reproduces_kernel(self):
        rng = np.random.default_rng(41)
        k = random_kernel(rng, 5)
        Q = whitening_pca(k)
        np.testing.assert_allclose(Q.T @ Q, k.W, atol=1e-12)

    def test_zca_factor_is_symmetric_square_root(self):
        rng = np.random.default_rng(43)
        k = random_kernel(rng, 5)
        R = whitening_zca(k)
        np.testing.assert_allclose(R, R.T, atol=1e-12)
        np.testing.assert_allclose(R @ R, k.W, atol=1e-12)

    def test_identity_kernel_gives_identity_factors(self):
        k = identity_kernel(4)
        np.testing.assert_allclose(whitening_pca(k), np.eye(4), atol=1e-15)
        np.testing.assert_allclose(whitening_zca(k), np.eye(4), atol=1e-15)

    def test_factors_agree_on_inner_products(self):
        # Both factors realize the same bilinear form.
        rng = np.random.default_rng(47)
        k = random_kernel(rng, 6)
        Q, R = whitening_pca(k), whitening_zca(k)
        x, y = rng.standard_normal((2, 6))
        expected = x @ k.W @ y
        assert (Q @ x) @ (Q @ y) == pytest.approx(expected, rel=1e-10)
        assert (R @ x) @ (R @ y) == pytest.approx(expected, rel=1e-10)


class TestGradients:
    def test_trace_loss_at_identity_frozen(self):
        k = identity_kernel(2)
        g = kernel_grad(k, np.eye(2))
        np.testing.assert_allclose(g.d_skew, [0.0], atol=1e-15)
        np.testing.assert_allclose(g.d_diag, [4.0 / np.pi, 4.0 / np.pi], atol=1e-15)

    def test_factor_grads_shapes(self):
        rng = np.random.default_rng(53)
        k = random_kernel(rng, 4)
        dL_dP, dL_dlam = kernel_factor_grads(k, rng.standard_normal((4, 4)))
        assert dL_dP.shape == (4, 4)
        assert dL_dlam.shape == (4,)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(59)
        dim = 5
        s = rng.uniform(-0.7, 0.7, dim * (dim - 1) // 2)
        t = rng.uniform(-0.7, 0.7, dim)
        A = rng.standard_normal((dim, dim))

        def loss(s_vec, t_vec):
            k = assemble_kernel(SkewParams(entries=s_vec, dim=dim), DiagParams(t=t_vec))
            return float(np.sum(A * k.W))

        k = assemble_kernel(SkewParams(entries=s, dim=dim), DiagParams(t=t))
        g = kernel_grad(k, A)

        eps = 1e-6
        fd_s = np.empty_like(s)
        for i in range(s.size):
            hi, lo = s.copy(), s.copy()
            hi[i] += eps
            lo[i] -= eps
            fd_s[i] = (loss(hi, t) - loss(lo, t)) / (2 * eps)
        fd_t = np.empty_like(t)
        for i in range(t.size):
            hi, lo = t.copy(), t.copy()
            hi[i] += eps
            lo[i] -= eps
            fd_t[i] = (loss(s, hi) - loss(s, lo)) / (2 * eps)

        np.testing.assert_allclose(g.d_skew, fd_s, atol=1e-7)
        np.testing.assert_allclose(g.d_diag, fd_t, atol=1e-7)

    def test_max_norm(self):
        g = KernelGradient(d_skew=np.array([1.0, -3.0]), d_diag=np.array([2.0]))
        assert g.max_norm() == 3.0

    def test_symmetric_loss_kills_skew_direction_at_identity(self):
        # At P = I with equal eigenvalues, rotating the frame cannot
        # change <A, W> for symmetric A: the skew gradient vanishes.
        rng = np.random.default_rng(61)
        A = rng.standard_normal((3, 3))
        g = kernel_grad(identity_kernel(3), A + A.T)
        np.testing.assert_allclose(g.d_skew, 0.0, atol=1e-12)


class TestParamCount:
    def test_five_level_pyramid_layout(self):
        full, free = param_count([64, 64, 128, 128, 128])
        assert full == 57344
        assert free == 28928

    def test_single_level(self):
        assert param_count([4]) == (16, 10)
        assert param_count([1]) == (1, 1)

    def test_free_is_skew_plus_diag(self):
        dims = [3, 7, 12]
        full, free = param_count(dims)
        assert full == sum(c * c for c in dims)
        assert free == sum(c * (c - 1) // 2 + c for c in dims)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            param_count([])

    def test_nonpositive_rejected(self):
        with pytest.raises(ValueError):
            param_count([4, 0])


class TestSerialization:
    def test_round_trip_is_bitwise(self, tmp_path):
        rng = np.random.default_rng(67)
        k = random_kernel(rng, 6, scale=3.0)
        path = tmp_path / "k.lcvk"
        save_kernel(path, k)
        k2 = load_kernel(path)
        assert np.array_equal(k2.skew_params.entries, k.skew_params.entries)
        assert np.array_equal(k2.diag_params.t, k.diag_params.t)
        assert np.array_equal(k2.W, k.W)

    def test_identity_round_trip(self, tmp_path):
        path = tmp_path / "id.lcvk"
        save_kernel(path, identity_kernel(3))
        np.testing.assert_array_equal(load_kernel(path).W, np.eye(3))

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.lcvk"
        path.write_bytes(b"NOPE" + bytes(16))
        with pytest.raises(ValueError, match="magic"):
            load_kernel(path)

    def test_truncated_rejected(self, tmp_path):
        rng = np.random.default_rng(71)
        path = tmp_path / "t.lcvk"
        save_kernel(path, random_kernel(rng, 4))
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(ValueError):
            load_kernel(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        path = tmp_path / "x.lcvk"
        save_kernel(path, identity_kernel(2))
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(ValueError):
            load_kernel(path)
