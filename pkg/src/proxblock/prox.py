"""Proximal operators.

All operators share the signature ``prox(v, rho) -> array`` where ``rho`` is
the scale of ``prox_{rho g}``. Projections onto convex sets ignore ``rho``.
:class:`ProxFn` bundles an operator with a label for solver traces.
"""
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "ProxFn",
    "prox_nonneg",
    "prox_soft_threshold",
    "prox_project_ones",
    "prox_flat_rows",
    "prox_grad_step",
    "nonneg",
    "soft_threshold",
    "project_ones",
    "flat_rows",
    "grad_step",
    "zero_penalty",
]


def prox_nonneg(v, rho=1.0):
    """Projection onto the non-negative orthant, ``max(0, v)``."""
    return np.maximum(np.asarray(v, dtype=float), 0.0)


def prox_soft_threshold(v, rho, weight):
    """Soft thresholding, the prox of ``weight * ||.||_1`` at scale ``rho``.

    Entries are shrunk toward zero by ``rho * weight``.
    """
    if weight < 0:
        raise ValueError(f"soft-threshold weight must be >= 0, got {weight}")
    v = np.asarray(v, dtype=float)
    return np.sign(v) * np.maximum(np.abs(v) - rho * weight, 0.0)


def prox_project_ones(v, rho=1.0):
    """Projection onto the single point ``1_K``."""
    return np.ones(np.shape(v))


def prox_flat_rows(M, rho, rows, row_length):
    """Replace the selected rows of a row-major flattened matrix by their mean.

    This is the Euclidean projection onto matrices whose selected rows are
    constant; the other rows pass through unchanged.
    """
    M = np.asarray(M, dtype=float)
    if M.size % row_length:
        raise ValueError(
            f"vector of length {M.size} is not a whole number of rows "
            f"of length {row_length}")
    n_rows = M.size // row_length
    rows = list(rows)
    bad = [r for r in rows if not 0 <= r < n_rows]
    if bad:
        raise IndexError(f"row indices {bad} out of range for {n_rows} rows")
    out = M.reshape(n_rows, row_length).copy()
    if rows:
        out[rows] = out[rows].mean(axis=1, keepdims=True)
    return out.reshape(M.shape)


def prox_grad_step(grad, v, mu, post=None):
    """One forward-backward step ``post(v - mu * grad(v))``.

    For smooth ``f`` this serves as an inexact ``prox_{mu f}``. ``post`` is
    an optional prox applied afterwards (e.g. non-negativity).
    """
    if not mu > 0:
        raise ValueError(f"step size must be positive, got {mu}")
    g = np.asarray(grad(v), dtype=float)
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite gradient in forward-backward step")
    out = v - mu * g
    if post is not None:
        out = post(out, mu)
    return out


@dataclass(frozen=True)
class ProxFn:
    """A proximal operator with a trace label.

    ``func(v, rho)`` evaluates the operator. ``indicator`` marks projections
    onto convex sets, which are scale-free and idempotent.
    """
    func: Callable
    descriptor: str
    indicator: bool = False
    params: dict = field(default_factory=dict, compare=False)

    def __call__(self, v, rho=1.0):
        return self.func(v, rho)


def nonneg():
    return ProxFn(prox_nonneg, "nonneg", indicator=True)


def soft_threshold(weight):
    if weight < 0:
        raise ValueError(f"soft-threshold weight must be >= 0, got {weight}")
    return ProxFn(lambda v, rho: prox_soft_threshold(v, rho, weight),
                  f"l1({weight:g})", params={"weight": weight})


def project_ones():
    return ProxFn(prox_project_ones, "ones", indicator=True)


def flat_rows(rows, row_length):
    rows = tuple(rows)
    return ProxFn(lambda v, rho: prox_flat_rows(v, rho, rows, row_length),
                  f"flat_rows{list(rows)}", indicator=True,
                  params={"rows": rows, "row_length": row_length})


def grad_step(grad, post=None):
    """Forward-backward operator; called as ``prox(v, mu)``."""
    label = "grad_step" if post is None else f"grad_step+{post.descriptor}"
    return ProxFn(lambda v, mu: prox_grad_step(grad, v, mu, post=post), label)


def zero_penalty():
    """Prox of ``g = 0``, the identity."""
    return ProxFn(lambda v, rho: np.array(v, dtype=float), "zero")
