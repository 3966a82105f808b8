"""Sign-constrained exactly-linearizable models for identification and convex MPC."""
from .el_model import ConfigError, ELModel, SignedLinearCore
from .mpc import MpcController, MpcSpec, build_qp, closed_loop, control_step
from .qp import QPProblem, QPSolver
from .signs import (
    ConstraintReport,
    LinearSystem,
    SignPattern,
    SignSet,
    check_linear,
    check_positivity_empirical,
    check_sampled,
    discrete_to_continuous,
    powertrain_pattern,
    two_tank_pattern,
)
from .transforms import ConditionedTransform, MonotoneTransform, SinhLayer

__version__ = "0.1.0"

__all__ = [
    "ConditionedTransform", "ConfigError", "ConstraintReport", "ELModel", "LinearSystem",
    "MonotoneTransform", "MpcController", "MpcSpec", "QPProblem", "QPSolver", "SignPattern",
    "SignSet", "SignedLinearCore", "SinhLayer", "build_qp", "check_linear",
    "check_positivity_empirical", "check_sampled", "closed_loop", "control_step",
    "discrete_to_continuous", "powertrain_pattern", "two_tank_pattern",
]
