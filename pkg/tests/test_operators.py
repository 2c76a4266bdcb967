import numpy as np
import pytest

from proxblock import operators as ops
from proxblock.operators import DimensionError

# top singular value of the 8-point forward difference with a zero last row,
# from eigvalsh(G^T G) of the explicit matrix
GRAD_1x8_SNORM = 1.9615705608064609


def forward_diff_matrix(h, w, axis):
    """Explicit forward-difference matrix on a row-major h x w image."""
    n = h * w
    G = np.zeros((n, n))
    for r in range(h):
        for c in range(w):
            i = r * w + c
            if axis == "x" and c + 1 < w:
                G[i, i], G[i, i + 1] = -1, 1
            if axis == "y" and r + 1 < h:
                G[i, i], G[i, i + w] = -1, 1
    return G


def all_kinds():
    rng = np.random.default_rng(3)
    return [
        ops.identity(5),
        ops.dense(rng.standard_normal((4, 6))),
        ops.build_gradient_op(3, 4, "x"),
        ops.build_gradient_op(3, 4, "y"),
        ops.build_gradient_op(4, 5, "x", channels=3),
        ops.build_gradient_op(4, 5, "y", channels=3),
        ops.ones_row(7),
        ops.ones_row(4, copies=3),
    ]


KIND_IDS = ["identity", "dense", "gx", "gy", "gx3", "gy3", "ones", "ones3"]


class TestApply:
    def test_identity(self):
        np.testing.assert_array_equal(ops.identity(2).apply([1, -2]), [1, -2])

    def test_dense(self):
        L = ops.dense([[1, 0], [1, 1]])
        np.testing.assert_array_equal(ops.apply(L, [2, 3]), [2, 5])

    def test_ones_row(self):
        np.testing.assert_array_equal(ops.ones_row(3).apply([1, 2, 3]), [6])

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError, match="expected vector of length 2"):
            ops.dense([[1, 0], [1, 1]]).apply([1, 2, 3])


class TestAdjoint:
    def test_identity(self):
        np.testing.assert_array_equal(ops.identity(1).adjoint([4]), [4])

    def test_dense(self):
        L = ops.dense([[1, 0], [1, 1]])
        np.testing.assert_array_equal(ops.apply_adjoint(L, [1, 1]), [2, 1])

    def test_ones_row(self):
        np.testing.assert_array_equal(ops.ones_row(3).adjoint([2]), [2, 2, 2])

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            ops.ones_row(3).adjoint([1, 2])

    @pytest.mark.parametrize("L", all_kinds(), ids=KIND_IDS)
    def test_inner_product_identity(self, L):
        rng = np.random.default_rng(0)
        for _ in range(100):
            x = rng.standard_normal(L.in_dim)
            y = rng.standard_normal(L.out_dim)
            lhs = L.apply(x) @ y
            rhs = x @ L.adjoint(y)
            assert abs(lhs - rhs) <= 1e-10 * (1 + np.linalg.norm(x) * np.linalg.norm(y))


class TestGradientOp:
    def test_row_image(self):
        G = ops.build_gradient_op(1, 3, "x")
        np.testing.assert_array_equal(G.apply([1, 3, 6]), [2, 3, 0])

    def test_column_image(self):
        G = ops.build_gradient_op(2, 1, "y")
        np.testing.assert_array_equal(G.apply([5, 9]), [4, 0])

    @pytest.mark.parametrize("axis", ["x", "y"])
    def test_constant_image_in_nullspace(self, axis):
        G = ops.build_gradient_op(5, 6, axis, channels=2)
        np.testing.assert_array_equal(G.apply(np.full(60, 3.7)), np.zeros(60))

    @pytest.mark.parametrize("h,w", [(1, 5), (4, 1), (3, 4), (5, 2)])
    @pytest.mark.parametrize("axis", ["x", "y"])
    def test_matches_explicit_matrix(self, h, w, axis):
        G = ops.build_gradient_op(h, w, axis)
        np.testing.assert_allclose(G.to_matrix(), forward_diff_matrix(h, w, axis),
                                   atol=0, rtol=0)

    def test_square(self):
        G = ops.build_gradient_op(3, 5, "y")
        assert G.in_dim == G.out_dim == 15

    @pytest.mark.parametrize("h,w", [(1, 1), (0, 4)])
    def test_too_small(self, h, w):
        with pytest.raises(ValueError):
            ops.build_gradient_op(h, w, "x")

    def test_bad_axis(self):
        with pytest.raises(ValueError):
            ops.build_gradient_op(2, 2, "z")


class TestSpectralNorm:
    def test_diagonal(self):
        assert ops.spectral_norm(ops.dense(np.diag([3.0, 1.0]))) == pytest.approx(3.0, rel=1e-6)

    @pytest.mark.parametrize("n", [1, 4, 50])
    def test_identity(self, n):
        assert ops.spectral_norm(ops.identity(n)) == 1.0

    def test_gradient_row_image(self):
        G = ops.build_gradient_op(1, 8, "x")
        ref = np.sqrt(np.linalg.eigvalsh(G.to_matrix().T @ G.to_matrix()).max())
        assert ref == pytest.approx(GRAD_1x8_SNORM, abs=1e-14)
        s = ops.spectral_norm(G)
        assert 1.9 < s < 2.0
        assert s == pytest.approx(GRAD_1x8_SNORM, rel=1e-6)
        assert G.snorm_converged

    def test_ones_row_copies(self):
        assert ops.spectral_norm(ops.ones_row(9, copies=4)) == pytest.approx(3.0, rel=1e-6)

    @pytest.mark.parametrize("seed", range(5))
    def test_dense_against_svd(self, seed):
        M = np.random.default_rng(seed).standard_normal((7, 5))
        L = ops.dense(M)
        ref = np.linalg.norm(M, 2)
        assert abs(ops.spectral_norm(L) - ref) <= 1e-6 * ref

    def test_cached(self):
        L = ops.dense(np.diag([2.0, 1.0]))
        s = L.snorm()
        L.matrix = np.diag([5.0, 1.0])
        assert L.snorm() == s
        assert L.snorm(recompute=True) == pytest.approx(5.0, rel=1e-6)

    def test_unconverged_is_flagged(self):
        M = np.diag([1.0, 0.999999, 0.5])
        L = ops.dense(M)
        with pytest.warns(RuntimeWarning, match="did not converge"):
            s = ops.spectral_norm(L, tol=1e-12, max_iter=3)
        assert L.snorm_converged is False
        assert 0.5 < s <= 1.0

    @pytest.mark.parametrize("L", all_kinds(), ids=KIND_IDS)
    def test_norm_bound(self, L):
        tol = 1e-6
        s = ops.spectral_norm(L, tol=tol)
        rng = np.random.default_rng(1)
        for _ in range(100):
            x = rng.standard_normal(L.in_dim)
            assert np.linalg.norm(L.apply(x)) <= (1 + 2 * tol) * s * np.linalg.norm(x)

    @pytest.mark.parametrize("L", all_kinds(), ids=KIND_IDS)
    def test_against_explicit_singular_values(self, L):
        ref = np.linalg.norm(L.to_matrix(), 2)
        assert abs(ops.spectral_norm(L) - ref) <= 1e-6 * ref


@pytest.mark.parametrize("L", all_kinds(), ids=KIND_IDS)
def test_dense_agrees_with_explicit_product(L):
    M = L.to_matrix()
    D = ops.dense(M)
    rng = np.random.default_rng(2)
    x = rng.standard_normal(L.in_dim)
    y = rng.standard_normal(L.out_dim)
    np.testing.assert_allclose(D.apply(x), L.apply(x), rtol=0, atol=1e-12)
    np.testing.assert_allclose(D.adjoint(y), L.adjoint(y), rtol=0, atol=1e-12)
