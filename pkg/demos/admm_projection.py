"""
Projecting onto the orthant with linearized ADMM
================================================

The smallest useful problem: find the point of the non-negative orthant
closest to ``v``. Written as ``f(x) + g(x)`` with ``f = 1/2 ||x - v||^2`` and
``g`` the indicator of ``x >= 0``, its answer is simply ``max(v, 0)``, which
lets us watch the solver converge to a known target.
"""

import numpy as np

from proxblock import ConstraintSpec, StopCriteria, admm_solve, identity
from proxblock import prox

v = np.array([1.5, -2.0, 0.3, -0.1, 4.0])

# the prox of mu * f has a closed form
def f_prox(w, mu):
    return (w + mu * v) / (1 + mu)

# L is the identity, so ||L||_s = 1 and rho = mu is the tightest coupling
constraint = ConstraintSpec(identity(v.size), prox.nonneg())

# eps_abs > 0 matters here: coordinates that end at exactly 0 have a zero
# relative threshold
criteria = StopCriteria(eps_abs=1e-8, eps_rel=1e-6, max_iter=500)
x, state = admm_solve(np.zeros_like(v), f_prox, 1.0, constraint, criteria)

print("status      ", state.status, "after", state.iter, "iterations")
print("solution    ", np.round(x, 6) + 0.0)
print("max(v, 0)   ", np.maximum(v, 0))

# the trace has one record per iteration; the residual norms shrink
# until both drop below their thresholds
for rec in state.trace[:: max(1, state.iter // 6)]:
    c = rec.constraints[0]
    print(f"k={rec.iter:3d}  |r|={c.r_norm:.2e} (<= {c.eps_pri:.2e})"
          f"  |s|={c.s_norm:.2e} (<= {c.eps_dual:.2e})")
