"""Non-negative matrix factorization ``D ~ A S`` solved with block-SDMM.

``A`` (B x K) holds endmember spectra in its columns, ``S`` (K x L) the
per-pixel amplitudes. Inside the solver ``A`` is flattened column-major so
that column sums are contiguous segment sums; ``S`` is flattened row-major so
each component row is a contiguous row-major image.
"""
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from . import operators as ops
from . import prox
from .solvers import BlockProblem, ConstraintSpec, StopCriteria, bsdmm_solve

__all__ = [
    "FactorModel",
    "UnmixingConfig",
    "objective",
    "grad_A",
    "grad_S",
    "step_h",
    "build_unmixing_problem",
    "unmixing_constraints",
    "init_spectra",
    "init_amplitudes",
    "unmix",
    "total_variation",
    "flatten_A",
    "unflatten_A",
]


@dataclass
class FactorModel:
    A: np.ndarray
    S: np.ndarray
    D: np.ndarray
    image_shape: Optional[Tuple[int, int]] = None

    @property
    def dims(self):
        B, K = self.A.shape
        return B, self.S.shape[1], K


@dataclass
class UnmixingConfig:
    """Settings of the unmixing model.

    ``K`` counts all components, including the flat background (which is
    the last component when ``background`` is set).
    """
    K: int
    lambda_tv: float = 0.0
    background: bool = False
    beta: Optional[float] = None
    reference_pixels: Optional[Sequence[int]] = None
    image_shape: Optional[Tuple[int, int]] = None
    seed: int = 0
    mu_fallback: Optional[float] = None
    step_slack: float = 0.9

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.lambda_tv < 0:
            raise ValueError("lambda_tv must be non-negative")
        if not 0 < self.step_slack <= 1:
            raise ValueError("step_slack must be in (0, 1]")

    @property
    def background_row(self):
        return self.K - 1 if self.background else None


def _check_shapes(A, S, D):
    A, S, D = (np.asarray(m, dtype=float) for m in (A, S, D))
    if A.ndim != 2 or S.ndim != 2 or D.ndim != 2:
        raise ValueError("A, S and D must be 2-d")
    if A.shape[1] != S.shape[0] or D.shape != (A.shape[0], S.shape[1]):
        raise ValueError(f"incompatible shapes A{A.shape} S{S.shape} "
                         f"D{D.shape}")
    return A, S, D


def objective(A, S, D):
    """Squared Frobenius misfit ``||A S - D||^2``."""
    A, S, D = _check_shapes(A, S, D)
    R = A @ S - D
    return float(np.sum(R * R))


def grad_A(A, S, D):
    A, S, D = _check_shapes(A, S, D)
    return 2 * (A @ S - D) @ S.T


def grad_S(A, S, D):
    A, S, D = _check_shapes(A, S, D)
    return 2 * A.T @ (A @ S - D)


def step_h(j, A, S, fallback=None):
    """Gradient step size for block ``j`` ('A'/0 or 'S'/1).

    Returns the inverse Lipschitz constant of the block gradient,
    ``1/(2 ||S||_s^2)`` for ``A`` and ``1/(2 ||A||_s^2)`` for ``S``. If the
    other factor vanishes, ``fallback`` is returned instead.
    """
    if j in (0, "A"):
        other = S
    elif j in (1, "S"):
        other = A
    else:
        raise ValueError(f"block must be 'A' or 'S', got {j!r}")
    norm = np.linalg.norm(np.asarray(other, dtype=float), 2)
    if norm == 0:
        if fallback is None:
            raise ZeroDivisionError("other factor is zero and no fallback set")
        return fallback
    return 1.0 / (2 * norm ** 2)


def flatten_A(A):
    return np.asarray(A, dtype=float).ravel(order="F")


def unflatten_A(x, B, K):
    return x.reshape(K, B).T


def total_variation(S, image_shape):
    """Anisotropic total variation summed over all rows of ``S``."""
    S = np.asarray(S, dtype=float)
    h, w = image_shape
    imgs = S.reshape(S.shape[0], h, w)
    return float(np.abs(np.diff(imgs, axis=2)).sum()
                 + np.abs(np.diff(imgs, axis=1)).sum())


def unmixing_constraints(B, L, config):
    """Constraint lists ``(cons_A, cons_S)`` for a ``B x L`` data matrix."""
    K = config.K
    cons_A = [ConstraintSpec(ops.ones_row(B, copies=K), prox.project_ones())]
    cons_S = []
    if config.background:
        cons_S.append(ConstraintSpec(ops.identity(K * L),
                                     prox.flat_rows([config.background_row], L)))
    if config.lambda_tv > 0:
        if config.image_shape is None:
            raise ValueError("lambda_tv > 0 needs image_shape")
        h, w = config.image_shape
        for axis in ("x", "y"):
            cons_S.append(ConstraintSpec(
                ops.build_gradient_op(h, w, axis, channels=K),
                prox.soft_threshold(config.lambda_tv)))
    return cons_A, cons_S


def build_unmixing_problem(D, config, A0, S0=None):
    """Two-block problem for the constrained unmixing objective.

    Block ``A``: forward-backward step on the fidelity with non-negativity,
    plus the column normalization ``1_B^T A = 1_K``. Block ``S``:
    forward-backward step with non-negativity, plus a flat background row
    (if ``config.background``) and one soft-threshold constraint per
    gradient direction (if ``config.lambda_tv > 0``).
    """
    D = np.asarray(D, dtype=float)
    B, L = D.shape
    K = config.K
    A0 = np.asarray(A0, dtype=float)
    S0 = init_amplitudes(K, L) if S0 is None else np.asarray(S0, dtype=float)
    _check_shapes(A0, S0, D)
    if config.image_shape is not None:
        h, w = config.image_shape
        if h * w != L:
            raise ValueError(f"image_shape {config.image_shape} does not "
                             f"match {L} pixels")

    fallback = config.mu_fallback
    if fallback is None:
        fallback = 1.0 / (2 * np.linalg.norm(D, 2) ** 2)

    def A_of(xs):
        return unflatten_A(xs[0], B, K)

    def S_of(xs):
        return xs[1].reshape(K, L)

    def prox_A(v, mu, xs):
        S = S_of(xs)
        return prox.prox_grad_step(
            lambda a: flatten_A(grad_A(unflatten_A(a, B, K), S, D)),
            v, mu, post=prox.prox_nonneg)

    def prox_S(v, mu, xs):
        A = A_of(xs)
        return prox.prox_grad_step(
            lambda s: grad_S(A, s.reshape(K, L), D).ravel(),
            v, mu, post=prox.prox_nonneg)

    # stepping exactly at 1/Lipschitz cancels the dual pull along the A/S
    # scale direction, so the normalization never becomes feasible
    def h(j, xs):
        return config.step_slack * step_h(j, A_of(xs), S_of(xs),
                                          fallback=fallback)

    cons_A, cons_S = unmixing_constraints(B, L, config)
    return BlockProblem(
        blocks=[flatten_A(A0), S0.ravel()],
        f_prox=[prox_A, prox_S],
        h=h,
        constraints=[cons_A, cons_S],
        beta=config.beta,
        objective=lambda xs: objective(A_of(xs), S_of(xs), D),
        names=["A", "S"],
    )


def _normalize_columns(A):
    sums = A.sum(axis=0)
    A = A.copy()
    flat = sums <= 0
    A[:, flat] = 1.0
    sums[flat] = A.shape[0]
    return A / sums


def init_spectra(D, reference_pixels=None, K=None, background=True, seed=0):
    """Initial spectra from reference pixels.

    With ``background`` the last column is the per-band minimum over all
    pixels and every other column is a reference pixel's spectrum minus that
    background, clipped at zero. Without it the reference spectra are used
    directly. All columns are normalized to unit sum.

    If ``reference_pixels`` is missing or has the wrong length, the
    non-background columns are drawn uniformly from a generator seeded with
    ``seed`` instead.
    """
    D = np.asarray(D, dtype=float)
    B, L = D.shape
    if K is None:
        if reference_pixels is None:
            raise ValueError("need K or reference_pixels")
        K = len(reference_pixels) + int(background)
    n_free = K - int(background)
    cols = []
    bg = D.min(axis=1) if background else np.zeros(B)
    if reference_pixels is not None and len(reference_pixels) == n_free:
        for p in reference_pixels:
            if not 0 <= p < L:
                raise IndexError(f"reference pixel {p} out of range")
            cols.append(np.maximum(D[:, p] - bg, 0.0))
        free = np.column_stack(cols) if cols else np.zeros((B, 0))
    else:
        rng = np.random.default_rng(seed)
        free = rng.random((B, n_free))
    A0 = np.column_stack([free, bg]) if background else free
    return _normalize_columns(A0)


def init_amplitudes(K, L):
    return np.zeros((K, L))


def unmix(D, config, criteria=None, A0=None, S0=None, keep_history=False):
    """Solve the unmixing problem; returns ``(A, S, state)``."""
    D = np.asarray(D, dtype=float)
    B, L = D.shape
    if A0 is None:
        A0 = init_spectra(D, config.reference_pixels, K=config.K,
                          background=config.background, seed=config.seed)
    problem = build_unmixing_problem(D, config, A0, S0)
    xs, state = bsdmm_solve(problem, criteria or StopCriteria(),
                            keep_history=keep_history)
    return unflatten_A(xs[0], B, config.K).copy(), xs[1].reshape(config.K, L), state
