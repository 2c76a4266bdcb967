"""Block-SDMM: proximal ADMM-type solvers for block-convex problems with
many constraints, and a constrained NMF built on top of them."""
from . import nmf, operators, prox, solvers
from .operators import LinearMap, build_gradient_op, dense, identity, ones_row, spectral_norm
from .solvers import (BlockProblem, ConstraintSpec, StopCriteria, admm_solve,
                      bsdmm_solve, sdmm_solve)

__version__ = "0.1.0"
