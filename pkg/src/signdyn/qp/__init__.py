from ._backend import available as available_backends, default_backend
from .solver import (
    MAX_ITER,
    PRIMAL_INFEASIBLE,
    SOLVED,
    QPError,
    QPProblem,
    QPSolution,
    QPSolver,
    dump_triplets,
    load_triplets,
    solve,
)

__all__ = [
    "MAX_ITER", "PRIMAL_INFEASIBLE", "SOLVED", "QPError", "QPProblem", "QPSolution",
    "QPSolver", "dump_triplets", "load_triplets", "solve", "available_backends",
    "default_backend",
]
