"""Matrix-free linear operators used as constraint maps.

Every operator acts on flat float vectors. The structured kinds (identity,
forward differences, column sums) never materialize a matrix; ``dense`` wraps
an explicit array. Spectral norms are estimated lazily by power iteration on
``L^T L`` and cached on the instance.
"""
import warnings

import numpy as np

__all__ = [
    "DimensionError",
    "LinearMap",
    "identity",
    "dense",
    "ones_row",
    "build_gradient_op",
    "apply",
    "apply_adjoint",
    "spectral_norm",
]

KINDS = ("identity", "dense", "gradient_x", "gradient_y", "ones_row")


class DimensionError(ValueError):
    """Raised when a vector does not match the operator's domain or range."""


class LinearMap:
    """A linear map ``L: R^in_dim -> R^out_dim`` with its adjoint.

    Use the factory functions (:func:`identity`, :func:`dense`,
    :func:`ones_row`, :func:`build_gradient_op`) rather than calling the
    constructor directly.

    Attributes
    ----------
    in_dim, out_dim : int
        Sizes of ``x`` and ``L x``.
    kind : str
        One of ``identity``, ``dense``, ``gradient_x``, ``gradient_y``,
        ``ones_row``.
    cached_snorm : float or None
        Spectral norm estimate, filled by :func:`spectral_norm`.
    snorm_converged : bool or None
        Whether the power iteration that produced ``cached_snorm`` converged.
    """

    def __init__(self, kind, in_dim, out_dim, matrix=None, shape=None,
                 channels=1, length=None):
        if kind not in KINDS:
            raise ValueError(f"unknown operator kind {kind!r}")
        if in_dim < 1 or out_dim < 1:
            raise ValueError("operator dimensions must be positive")
        self.kind = kind
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        self.matrix = matrix
        self.shape = shape
        self.channels = channels
        self.length = length
        self.cached_snorm = None
        self.snorm_converged = None

    def __repr__(self):
        extra = ""
        if self.shape is not None:
            extra = f", image={self.shape}, channels={self.channels}"
        elif self.kind == "ones_row":
            extra = f", length={self.length}, copies={self.channels}"
        return f"LinearMap({self.kind}, {self.out_dim}x{self.in_dim}{extra})"

    def _check(self, v, expected, what):
        v = np.asarray(v, dtype=float)
        if v.ndim != 1 or v.size != expected:
            raise DimensionError(
                f"{self.kind} operator {what}: expected vector of length "
                f"{expected}, got shape {v.shape}")
        return v

    def apply(self, x):
        x = self._check(x, self.in_dim, "apply")
        if self.kind == "identity":
            return x.copy()
        if self.kind == "dense":
            return self.matrix @ x
        if self.kind == "ones_row":
            return x.reshape(self.channels, self.length).sum(axis=1)
        h, w = self.shape
        img = x.reshape(self.channels, h, w)
        out = np.zeros_like(img)
        if self.kind == "gradient_x":
            out[:, :, :-1] = img[:, :, 1:] - img[:, :, :-1]
        else:
            out[:, :-1, :] = img[:, 1:, :] - img[:, :-1, :]
        return out.ravel()

    def adjoint(self, y):
        y = self._check(y, self.out_dim, "adjoint")
        if self.kind == "identity":
            return y.copy()
        if self.kind == "dense":
            return self.matrix.T @ y
        if self.kind == "ones_row":
            return np.repeat(y, self.length)
        h, w = self.shape
        d = y.reshape(self.channels, h, w)
        out = np.zeros_like(d)
        # transpose of the forward difference with a zeroed last row
        if self.kind == "gradient_x":
            out[:, :, 1:] += d[:, :, :-1]
            out[:, :, :-1] -= d[:, :, :-1]
        else:
            out[:, 1:, :] += d[:, :-1, :]
            out[:, :-1, :] -= d[:, :-1, :]
        return out.ravel()

    @property
    def T(self):
        return _Adjoint(self)

    def to_matrix(self):
        """Explicit ``out_dim x in_dim`` matrix, built column by column."""
        eye = np.eye(self.in_dim)
        return np.column_stack([self.apply(e) for e in eye])

    def snorm(self, tol=1e-6, max_iter=1000, recompute=False):
        return spectral_norm(self, tol=tol, max_iter=max_iter,
                             recompute=recompute)


class _Adjoint:
    def __init__(self, op):
        self.op = op

    def __matmul__(self, y):
        return self.op.adjoint(y)


def identity(dim):
    """Identity operator on ``R^dim``."""
    return LinearMap("identity", dim, dim)


def dense(matrix):
    """Wrap an explicit ``out_dim x in_dim`` matrix."""
    m = np.array(matrix, dtype=float)
    if m.ndim != 2:
        raise DimensionError(f"dense operator needs a 2-d matrix, got {m.ndim}-d")
    return LinearMap("dense", m.shape[1], m.shape[0], matrix=m)


def ones_row(length, copies=1):
    """Row of ones ``1^T`` of the given length, repeated block-diagonally.

    With ``copies=K`` the operator maps a vector made of ``K`` consecutive
    segments of ``length`` entries to the ``K`` segment sums. A column-major
    flattened ``length x K`` matrix is thus mapped to its column sums.
    """
    if length < 1 or copies < 1:
        raise ValueError("ones_row needs positive length and copies")
    return LinearMap("ones_row", length * copies, copies, channels=copies,
                     length=length)


def build_gradient_op(height, width, axis, channels=1):
    """Forward-difference operator on a row-major ``height x width`` image.

    The last difference along ``axis`` is defined as zero, so the operator is
    square. ``channels`` stacks independent images (e.g. the rows of an
    abundance matrix), each of ``height*width`` pixels.

    Parameters
    ----------
    height, width : int
        Image dimensions; ``height*width`` must be at least 2.
    axis : {'x', 'y'}
        ``x`` differences along rows (horizontal), ``y`` along columns.
    channels : int
        Number of stacked images.
    """
    if height < 1 or width < 1 or height * width < 2:
        raise ValueError(
            f"gradient operator needs at least 2 pixels, got {height}x{width}")
    if axis not in ("x", "y"):
        raise ValueError(f"axis must be 'x' or 'y', got {axis!r}")
    n = height * width * channels
    return LinearMap(f"gradient_{axis}", n, n, shape=(height, width),
                     channels=channels)


def apply(L, x):
    return L.apply(x)


def apply_adjoint(L, y):
    return L.adjoint(y)


def spectral_norm(L, tol=1e-6, max_iter=1000, recompute=False):
    """Largest singular value of ``L`` by power iteration on ``L^T L``.

    Starts from the all-ones vector. If that vector lies in the null space of
    ``L`` (as for difference operators) it is perturbed once with a fixed
    pseudo-random vector. Iteration stops when the relative change of the
    estimate drops below ``tol/10``. If ``max_iter`` is exhausted the best
    estimate is returned, ``L.snorm_converged`` is set to False and a
    ``RuntimeWarning`` is issued.

    The result is cached on ``L``; pass ``recompute=True`` to refresh it.
    """
    if L.cached_snorm is not None and not recompute:
        return L.cached_snorm
    if L.kind == "identity":
        L.cached_snorm, L.snorm_converged = 1.0, True
        return 1.0

    x = np.ones(L.in_dim)
    if np.linalg.norm(L.apply(x)) <= 1e-12 * np.linalg.norm(x):
        x = x + np.random.default_rng(0).standard_normal(L.in_dim)
    x /= np.linalg.norm(x)
    Lx = L.apply(x)
    sigma = np.linalg.norm(Lx)
    converged = sigma == 0.0
    for _ in range(max_iter):
        if converged:
            break
        y = L.adjoint(Lx)
        ny = np.linalg.norm(y)
        if ny == 0.0:
            sigma, converged = 0.0, True
            break
        x = y / ny
        Lx = L.apply(x)
        new = np.linalg.norm(Lx)
        converged = abs(new - sigma) <= 0.1 * tol * new
        sigma = new
    if not converged:
        warnings.warn(f"spectral norm of {L!r} did not converge in "
                      f"{max_iter} iterations", RuntimeWarning, stacklevel=2)
    L.cached_snorm = float(sigma)
    L.snorm_converged = bool(converged)
    return L.cached_snorm
