"""First-order sensitivity analysis for Wasserstein distributionally robust optimization."""
from .catalog import builtin_constraint, builtin_loss
from .errors import (ConvergenceError, NumericalError, RadiusOrderMismatch, ValidationError,
                     WdroError)
from .measures import (DiscreteMeasure, NormSpec, SupportSpec, dual_norm, h_map, load_measure,
                       make_empirical, wasserstein_distance)
from .oracle import (OracleConfig, eval_dual, eval_dual_constrained, eval_primal_lowerbound,
                     fd_optimizer_slope, fd_value_slope, robust_optimize, robust_path)
from .problem import (ConstraintSet, LossModel, OptimizerCertificate, check_growth,
                      solve_base_problem)
from .sensitivity import (SensitivityReport, beth, first_order_optimizer, first_order_value,
                          upsilon, upsilon_at_r, upsilon_constrained)

__all__ = [
    "builtin_constraint", "builtin_loss",
    "ConvergenceError", "NumericalError", "RadiusOrderMismatch", "ValidationError", "WdroError",
    "DiscreteMeasure", "NormSpec", "SupportSpec", "dual_norm", "h_map", "load_measure",
    "make_empirical", "wasserstein_distance",
    "OracleConfig", "eval_dual", "eval_dual_constrained", "eval_primal_lowerbound",
    "fd_optimizer_slope", "fd_value_slope", "robust_optimize", "robust_path",
    "ConstraintSet", "LossModel", "OptimizerCertificate", "check_growth", "solve_base_problem",
    "SensitivityReport", "beth", "first_order_optimizer", "first_order_value", "upsilon",
    "upsilon_at_r", "upsilon_constrained",
]

__version__ = "0.1.0"
