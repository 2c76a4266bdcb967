"""Linearized ADMM, linearized SDMM and block-SDMM.

All engines minimize ``f(x_1..x_N) + sum_ij g_ij(L_ij x_j)`` in consensus
form with auxiliary variables ``z_ij`` and scaled duals ``u_ij``. Iterates are
flat vectors; ``f`` is only accessed through a per-block prox (often a single
forward-backward step).

A run terminates when every constraint is primal and dual feasible and, if
``StopCriteria.check_x`` is set, every block has stopped moving (relative
change below the same thresholds), or when ``max_iter`` is exhausted.
"""
import csv
import io
import logging
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .operators import LinearMap, spectral_norm

logger = logging.getLogger(__name__)

__all__ = [
    "SolverError",
    "NonFiniteError",
    "DivergenceError",
    "ConstraintSpec",
    "BlockProblem",
    "StopCriteria",
    "Residuals",
    "ConstraintRecord",
    "TraceRecord",
    "SolverState",
    "compute_residuals",
    "check_feasible",
    "coupled_rho",
    "admm_solve",
    "sdmm_solve",
    "bsdmm_solve",
    "trace_rows",
    "export_trace_csv",
    "TRACE_COLUMNS",
]

DIVERGENCE_LIMIT = 1e12
TRACE_COLUMNS = ("iter", "block", "constraint", "r_norm", "s_norm", "eps_pri",
                 "eps_dual", "mu", "rho", "objective")


class SolverError(RuntimeError):
    pass


class NonFiniteError(SolverError):
    pass


class DivergenceError(SolverError):
    pass


@dataclass
class ConstraintSpec:
    """One constraint ``g(L x)`` with its scale ``rho``.

    ``rho=None`` lets the engine derive it from the coupling bound.
    """
    L: LinearMap
    g: Callable
    rho: Optional[float] = None

    @property
    def descriptor(self):
        return getattr(self.g, "descriptor", "g")


@dataclass
class StopCriteria:
    eps_abs: float = 0.0
    eps_rel: float = 1e-2
    max_iter: int = 1000
    check_x: bool = True
    x_rel: Optional[float] = 1e-4

    @property
    def x_tol(self):
        # x_rel only ever tightens the x-change test
        return self.eps_rel if self.x_rel is None else min(self.eps_rel, self.x_rel)

    def __post_init__(self):
        if self.eps_abs < 0 or self.eps_rel < 0:
            raise ValueError("tolerances must be non-negative")
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")


@dataclass
class BlockProblem:
    """A block-convex problem for :func:`bsdmm_solve`.

    Attributes
    ----------
    blocks : list of ndarray
        Initial flat iterates ``x_j``.
    f_prox : list of callable
        ``f_prox[j](v, mu, xs)`` realizes ``prox_{mu f, j}(v)`` given the
        current list of all blocks ``xs``.
    h : callable
        ``h(j, xs) -> mu_j``, the step size of block ``j``.
    constraints : list of list of ConstraintSpec
        ``M_j`` constraints per block.
    beta : float, optional
        Coupling parameter; defaults to ``max_j M_j`` (at least 1).
    objective : callable, optional
        ``objective(xs)``, recorded in the trace when given.
    """
    blocks: List[np.ndarray]
    f_prox: List[Callable]
    h: Callable
    constraints: List[List[ConstraintSpec]]
    beta: Optional[float] = None
    objective: Optional[Callable] = None
    names: Optional[List[str]] = None

    def __post_init__(self):
        self.blocks = [np.array(x, dtype=float).ravel() for x in self.blocks]
        n = len(self.blocks)
        if n < 1:
            raise ValueError("need at least one block")
        if len(self.f_prox) != n or len(self.constraints) != n:
            raise ValueError("f_prox and constraints need one entry per block")
        for j, (x, cons) in enumerate(zip(self.blocks, self.constraints)):
            for i, c in enumerate(cons):
                if c.L.in_dim != x.size:
                    raise ValueError(
                        f"constraint {i} of block {j}: operator in_dim "
                        f"{c.L.in_dim} != block size {x.size}")
        if self.beta is None:
            self.beta = float(max(1, max(len(c) for c in self.constraints)))
        m_max = max(len(c) for c in self.constraints)
        if self.beta < 1 or self.beta > max(1, n * m_max):
            warnings.warn(f"beta={self.beta} outside [1, N*M_j]={[1, n * m_max]}",
                          RuntimeWarning, stacklevel=2)


class Residuals(tuple):
    """``(r, s, eps_pri, eps_dual)`` for one constraint."""
    __slots__ = ()

    def __new__(cls, r, s, eps_pri, eps_dual):
        return super().__new__(cls, (r, s, eps_pri, eps_dual))

    r = property(lambda self: self[0])
    s = property(lambda self: self[1])
    eps_pri = property(lambda self: self[2])
    eps_dual = property(lambda self: self[3])

    @property
    def r_norm(self):
        return float(np.linalg.norm(self.r))

    @property
    def s_norm(self):
        return float(np.linalg.norm(self.s))

    @property
    def primal_ok(self):
        return self.r_norm <= self.eps_pri

    @property
    def dual_ok(self):
        return self.s_norm <= self.eps_dual


@dataclass
class ConstraintRecord:
    block: int
    constraint: int
    r_norm: float
    s_norm: float
    eps_pri: float
    eps_dual: float
    mu: float
    rho: float


@dataclass
class TraceRecord:
    iter: int
    mu: List[float]
    constraints: List[ConstraintRecord]
    x_change: List[float]
    feasible: bool
    objective: Optional[float] = None


@dataclass
class SolverState:
    x: List[np.ndarray]
    z: List[List[np.ndarray]]
    u: List[List[np.ndarray]]
    rho: List[List[float]]
    z_prev: List[List[np.ndarray]] = None
    residuals: List[List[Residuals]] = None
    iter: int = 0
    trace: List[TraceRecord] = field(default_factory=list)
    feasible: bool = False
    converged: bool = False
    status: str = "running"
    beta: Optional[float] = None
    history: Optional[list] = None

    def snapshot(self):
        return {"x": [a.copy() for a in self.x],
                "z": [[a.copy() for a in zs] for zs in self.z],
                "u": [[a.copy() for a in us] for us in self.u],
                "rho": [list(r) for r in self.rho]}


def compute_residuals(L, x_new, z_new, z_old, u_new, rho, eps_abs=0.0,
                      eps_rel=1e-2):
    """Primal/dual residuals and their feasibility thresholds.

    ``r = L x - z``, ``s = L^T (z - z_old) / rho``,
    ``eps_pri = sqrt(p) eps_abs + eps_rel max(||L x||, ||z||)`` and
    ``eps_dual = sqrt(n) eps_abs + eps_rel ||L^T u|| / rho`` with ``p``,
    ``n`` the sizes of ``z`` and ``x``.
    """
    if not rho > 0:
        raise ValueError(f"rho must be positive, got {rho}")
    z_new, z_old, u_new = (np.asarray(a, dtype=float) for a in (z_new, z_old, u_new))
    Lx = L.apply(x_new)
    r = Lx - z_new
    s = L.adjoint(z_new - z_old) / rho
    p, n = L.out_dim, L.in_dim
    eps_pri = (np.sqrt(p) * eps_abs
               + eps_rel * max(np.linalg.norm(Lx), np.linalg.norm(z_new)))
    eps_dual = (np.sqrt(n) * eps_abs
                + eps_rel / rho * np.linalg.norm(L.adjoint(u_new)))
    return Residuals(r, s, float(eps_pri), float(eps_dual))


def check_feasible(state, criteria=None):
    """True iff every constraint satisfies both residual bounds."""
    if state.residuals is None:
        return False
    return all(res.primal_ok and res.dual_ok
               for block in state.residuals for res in block)


def coupled_rho(beta, mu_j, snorm_L):
    """``rho = beta * mu * ||L||_s^2``, the smallest admissible scale."""
    if beta <= 0 or mu_j <= 0 or snorm_L <= 0:
        raise ValueError("beta, mu and the spectral norm must be positive")
    return float(beta * mu_j * snorm_L ** 2)


def _threads():
    try:
        return max(1, int(os.environ.get("PROXBLOCK_THREADS", "1")))
    except ValueError:
        return 1


def _guard(v, k, name):
    if not np.all(np.isfinite(v)):
        raise NonFiniteError(f"non-finite {name} at iteration {k}")
    if np.linalg.norm(v) > DIVERGENCE_LIMIT:
        raise DivergenceError(
            f"||{name}|| exceeded {DIVERGENCE_LIMIT:g} at iteration {k}")


def _x_change_ok(x_new, x_old, criteria):
    tol = (np.sqrt(x_new.size) * criteria.eps_abs
           + criteria.x_tol * np.linalg.norm(x_new))
    return np.linalg.norm(x_new - x_old) <= tol


def _snorm(L):
    return L.cached_snorm if L.cached_snorm is not None else spectral_norm(L)


def _finish(state, criteria, k):
    state.iter = k
    state.feasible = check_feasible(state, criteria)
    done = state.feasible and (state.converged or not criteria.check_x)
    if done:
        state.status = "feasible"
    return done


def admm_solve(x0, f_prox, mu, constraint, criteria=None, keep_history=False,
               objective=None):
    """Linearized ADMM for ``f(x) + g(L x)``.

    Parameters
    ----------
    x0 : array
        Starting point.
    f_prox : callable
        ``f_prox(v, mu)`` evaluates ``prox_{mu f}(v)``.
    mu : float
        Step size of the ``f`` prox; should satisfy ``mu <= rho/||L||_s^2``.
    constraint : ConstraintSpec
        ``rho=None`` selects ``rho = mu ||L||_s^2``.
    criteria : StopCriteria, optional
    keep_history : bool
        Store a copy of ``(x, z, u)`` after every iteration in
        ``state.history`` (entry 0 is the initialization).

    Returns
    -------
    x : ndarray
    state : SolverState
    """
    criteria = criteria or StopCriteria()
    L, g = constraint.L, constraint.g
    snorm = _snorm(L)
    rho = constraint.rho if constraint.rho is not None else mu * snorm ** 2
    if not mu > 0 or not rho > 0:
        raise ValueError("mu and rho must be positive")
    if mu > rho / snorm ** 2 * (1 + 1e-12):
        warnings.warn(f"mu={mu} exceeds rho/||L||^2={rho / snorm ** 2}",
                      RuntimeWarning, stacklevel=2)

    x = np.array(x0, dtype=float).ravel()
    z = L.apply(x)
    u = np.zeros_like(z)
    state = SolverState(x=[x], z=[[z]], u=[[u]], rho=[[rho]], beta=1.0)
    if keep_history:
        state.history = [state.snapshot()]

    for k in range(1, criteria.max_iter + 1):
        x_new = f_prox(x - mu / rho * L.adjoint(L.apply(x) - z + u), mu)
        _guard(x_new, k, "x")
        z_old = z
        Lx = L.apply(x_new)
        z = g(Lx + u, rho)
        u = u + (Lx - z)
        _guard(z, k, "z")
        res = compute_residuals(L, x_new, z, z_old, u, rho,
                                criteria.eps_abs, criteria.eps_rel)
        dx = float(np.linalg.norm(x_new - x))
        state.converged = _x_change_ok(x_new, x, criteria)
        x = x_new
        state.x, state.z, state.u = [x], [[z]], [[u]]
        state.z_prev, state.residuals = [[z_old]], [[res]]
        done = _finish(state, criteria, k)
        state.trace.append(TraceRecord(
            k, [mu],
            [ConstraintRecord(0, 0, res.r_norm, res.s_norm, res.eps_pri,
                              res.eps_dual, mu, rho)],
            [dx], state.feasible,
            None if objective is None else float(objective([x]))))
        if keep_history:
            state.history.append(state.snapshot())
        if done:
            break
    else:
        state.status = "max_iter"
    return x, state


def _x_step(x, f_prox, mu, cons, z, u, rho):
    # linearized x-update shared by SDMM and bSDMM
    step = np.zeros_like(x)
    for c, zi, ui, ri in zip(cons, z, u, rho):
        step += mu / ri * c.L.adjoint(c.L.apply(x) - zi + ui)
    return f_prox(x - step, mu)


def _zu_update(c, x_new, z, u, rho):
    Lx = c.L.apply(x_new)
    z_new = c.g(Lx + u, rho)
    return z_new, u + (Lx - z_new)


def _zu_updates(cons, x_new, z, u, rho, pool):
    args = list(zip(cons, z, u, rho))
    if pool is None or len(args) < 2:
        return [_zu_update(c, x_new, zi, ui, ri) for c, zi, ui, ri in args]
    return list(pool.map(lambda a: _zu_update(a[0], x_new, *a[1:]), args))


def sdmm_solve(x0, f_prox, mu, constraints, criteria=None, beta=None,
               keep_history=False, objective=None):
    """Linearized SDMM for ``f(x) + sum_i g_i(L_i x)``.

    Constraints with ``rho=None`` get ``rho_i = beta * mu * ||L_i||_s^2``
    where ``beta`` defaults to the number of constraints. With no
    constraints this reduces to iterating ``f_prox`` until ``x`` stops
    changing.

    Returns ``(x, state)`` as :func:`admm_solve`.
    """
    criteria = criteria or StopCriteria()
    constraints = list(constraints)
    m = len(constraints)
    beta = float(max(1, m)) if beta is None else beta
    rho = []
    for i, c in enumerate(constraints):
        snorm = _snorm(c.L)
        r = c.rho if c.rho is not None else coupled_rho(beta, mu, snorm)
        if r / snorm ** 2 < beta * mu * (1 - 1e-12):
            warnings.warn(f"constraint {i}: rho/||L||^2 < beta*mu",
                          RuntimeWarning, stacklevel=2)
        rho.append(r)

    x = np.array(x0, dtype=float).ravel()
    z = [c.L.apply(x) for c in constraints]
    u = [np.zeros_like(zi) for zi in z]
    state = SolverState(x=[x], z=[z], u=[u], rho=[rho], beta=beta)
    if keep_history:
        state.history = [state.snapshot()]
    threads = _threads()
    pool = ThreadPoolExecutor(threads) if threads > 1 and m > 1 else None
    try:
        for k in range(1, criteria.max_iter + 1):
            x_new = _x_step(x, f_prox, mu, constraints, z, u, rho)
            _guard(x_new, k, "x")
            z_old = z
            z, u = map(list, zip(*_zu_updates(constraints, x_new, z, u, rho,
                                               pool))) if m else ([], [])
            res = [compute_residuals(c.L, x_new, zi, zo, ui, ri,
                                     criteria.eps_abs, criteria.eps_rel)
                   for c, zi, zo, ui, ri in zip(constraints, z, z_old, u, rho)]
            dx = float(np.linalg.norm(x_new - x))
            state.converged = _x_change_ok(x_new, x, criteria)
            x = x_new
            state.x, state.z, state.u = [x], [z], [u]
            state.z_prev, state.residuals = [z_old], [res]
            if m == 0:
                # nothing to be feasible against; stop on x alone
                state.iter = k
                state.feasible = True
                done = state.converged
                if done:
                    state.status = "feasible"
            else:
                done = _finish(state, criteria, k)
            state.trace.append(TraceRecord(
                k, [mu],
                [ConstraintRecord(0, i, rs.r_norm, rs.s_norm, rs.eps_pri,
                                  rs.eps_dual, mu, ri)
                 for i, (rs, ri) in enumerate(zip(res, rho))],
                [dx], state.feasible,
                None if objective is None else float(objective([x]))))
            if keep_history:
                state.history.append(state.snapshot())
            if done:
                break
        else:
            state.status = "max_iter"
    finally:
        if pool is not None:
            pool.shutdown()
    return x, state


def bsdmm_solve(problem, criteria=None, keep_history=False):
    """Block-SDMM for a :class:`BlockProblem`.

    Each iteration sweeps the blocks in order. Block ``j`` gets
    ``mu_j = h(j, xs)`` from the freshest iterates (blocks before ``j`` are
    already updated), then ``rho_ij = beta mu_j ||L_ij||_s^2`` for every one
    of its constraints, a linearized prox step for ``x_j`` and finally the
    ``z_ij``/``u_ij`` updates. Scaled duals are carried over unchanged when
    ``rho_ij`` changes.

    Returns
    -------
    xs : list of ndarray
    state : SolverState
    """
    criteria = criteria or StopCriteria()
    beta = problem.beta
    xs = [x.copy() for x in problem.blocks]
    z = [[c.L.apply(x) for c in cons]
         for x, cons in zip(xs, problem.constraints)]
    u = [[np.zeros_like(zi) for zi in zj] for zj in z]
    rho = [[float("nan")] * len(cons) for cons in problem.constraints]
    snorms = [[_snorm(c.L) for c in cons] for cons in problem.constraints]
    state = SolverState(x=xs, z=z, u=u, rho=rho, beta=beta)
    if keep_history:
        state.history = [state.snapshot()]
    n_blocks = len(xs)
    threads = _threads()
    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        for k in range(1, criteria.max_iter + 1):
            mus, records, dxs = [], [], []
            all_res, z_prev = [], []
            converged = True
            for j in range(n_blocks):
                cons = problem.constraints[j]
                mu = problem.h(j, xs)
                if not (np.isfinite(mu) and mu > 0):
                    raise SolverError(
                        f"step function returned mu={mu} for block {j} "
                        f"at iteration {k}")
                rho[j] = [coupled_rho(beta, mu, sn) for sn in snorms[j]]
                f_prox = problem.f_prox[j]
                x_new = _x_step(xs[j], lambda v, m_: f_prox(v, m_, xs), mu,
                                cons, z[j], u[j], rho[j])
                _guard(x_new, k, f"x[{j}]")
                z_old = z[j]
                if cons:
                    z[j], u[j] = map(list, zip(*_zu_updates(
                        cons, x_new, z[j], u[j], rho[j], pool)))
                res = [compute_residuals(c.L, x_new, zi, zo, ui, ri,
                                         criteria.eps_abs, criteria.eps_rel)
                       for c, zi, zo, ui, ri in zip(cons, z[j], z_old, u[j],
                                                    rho[j])]
                converged &= bool(_x_change_ok(x_new, xs[j], criteria))
                dxs.append(float(np.linalg.norm(x_new - xs[j])))
                xs[j] = x_new
                mus.append(float(mu))
                all_res.append(res)
                z_prev.append(z_old)
                records.extend(
                    ConstraintRecord(j, i, rs.r_norm, rs.s_norm, rs.eps_pri,
                                     rs.eps_dual, float(mu), ri)
                    for i, (rs, ri) in enumerate(zip(res, rho[j])))
            state.residuals, state.z_prev = all_res, z_prev
            state.converged = converged
            done = _finish(state, criteria, k)
            obj = (None if problem.objective is None
                   else float(problem.objective(xs)))
            state.trace.append(TraceRecord(k, mus, records, dxs,
                                           state.feasible, obj))
            if keep_history:
                state.history.append(state.snapshot())
            if done:
                break
        else:
            state.status = "max_iter"
    finally:
        if pool is not None:
            pool.shutdown()
    logger.debug("bsdmm finished after %d iterations: %s", state.iter,
                 state.status)
    return xs, state


def trace_rows(state):
    """Flatten a trace to one dict per (iteration, block, constraint)."""
    rows = []
    for rec in state.trace:
        obj = "" if rec.objective is None else rec.objective
        for c in rec.constraints:
            rows.append({"iter": rec.iter, "block": c.block,
                         "constraint": c.constraint, "r_norm": c.r_norm,
                         "s_norm": c.s_norm, "eps_pri": c.eps_pri,
                         "eps_dual": c.eps_dual, "mu": c.mu, "rho": c.rho,
                         "objective": obj})
    return rows


def export_trace_csv(state, path=None):
    """Write the trace CSV to ``path`` (atomically) or return it as text."""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=TRACE_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in trace_rows(state):
        writer.writerow({k: repr(float(v)) if isinstance(v, (float, np.floating))
                         else v for k, v in row.items()})
    text = buf.getvalue()
    if path is not None:
        from .io import atomic_write_text
        atomic_write_text(path, text)
    return text
