"""
Several constraints at once with linearized SDMM
================================================

SDMM gives every constraint its own auxiliary variable and scaled dual, so
constraints with different operators combine freely. Here we project ``v``
onto the probability simplex by stacking two simple pieces: ``x >= 0``
(operator: identity) and ``sum(x) = 1`` (operator: a row of ones).
"""

import numpy as np

from proxblock import ConstraintSpec, StopCriteria, identity, ones_row, sdmm_solve
from proxblock import prox

v = np.array([0.9, 0.8, -0.5, 0.1])

def f_prox(w, mu):
    return (w + mu * v) / (1 + mu)

constraints = [
    ConstraintSpec(identity(v.size), prox.nonneg()),
    ConstraintSpec(ones_row(v.size), prox.project_ones()),
]

# with two constraints the default coupling is beta = 2, which sets
# rho_i = 2 mu ||L_i||^2 for each of them
criteria = StopCriteria(eps_abs=1e-8, eps_rel=1e-6, max_iter=2000)
x, state = sdmm_solve(np.zeros_like(v), f_prox, 0.5, constraints, criteria)

print("status ", state.status, "after", state.iter, "iterations")
print("x      ", np.round(x, 5) + 0.0, " sum =", round(x.sum(), 6))
print("rho    ", state.rho[0])

# Sorting-based reference projection onto the simplex
u = np.sort(v)[::-1]
css = np.cumsum(u) - 1
k = np.nonzero(u - css / np.arange(1, v.size + 1) > 0)[0][-1]
print("oracle ", np.round(np.maximum(v - css[k] / (k + 1), 0), 5))

# Duplicating a constraint is harmless as long as beta counts it
dup = [constraints[0], constraints[0], constraints[1]]
x3, state3 = sdmm_solve(np.zeros_like(v), f_prox, 0.5, dup, criteria)
print("with a duplicated constraint:", np.round(x3, 5) + 0.0, state3.status)
