"""Numerical toolkit for second-order stochastic maximum principles.

Controlled stochastic evolution equations on Galerkin-discretized Gelfand
triples: forward and adjoint solvers, the operator-valued second-order
adjoint via its Riesz representation, and Monte Carlo checks of the
maximum condition.
"""

from importlib.metadata import PackageNotFoundError, version

from .bsee import (AdjointPair, AdjointRegressor, RiccatiSolution, check_duality, compare_adjoints,
                   lq_feedback_cost, solve_adjoint_regression, solve_adjoint_riccati, solve_riccati)
from .controls import Control, ControlDomainError, ControlSet, Spike
from .gelfand import DimensionError, GelfandTriple
from .mp import (MpResidualTable, MpVerdict, check_maximum_principle, cost, expansion_check,
                 hamiltonian, mp_residual, spike_control)
from .operators import EvolutionOperatorPair, check_coercivity, check_quasi_skew, skew_decompose
from .problems import CATALOG, ControlProblem, build
from .riesz import (AdjointTuple, RieszEstimator, RieszOperator, appropriate_check, eval_T,
                    eval_T_eps, riesz_matrix)
from .see import (StatePath, moment_sup, solve_first_variation, solve_linear, solve_second_variation,
                  solve_state, solve_z, solve_z_eps)
from .stochastics import (ConfigurationError, McConfig, NonFiniteError, OffGridError, TimeGrid,
                          WienerPath, sample_ensemble)

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # pragma: no cover
    __version__ = "0.0.0"

__all__ = [
    "AdjointPair", "AdjointRegressor", "AdjointTuple", "CATALOG", "ConfigurationError", "Control",
    "ControlDomainError", "ControlProblem", "ControlSet", "DimensionError", "EvolutionOperatorPair",
    "GelfandTriple", "McConfig", "MpResidualTable", "MpVerdict", "NonFiniteError", "OffGridError",
    "RiccatiSolution", "RieszEstimator", "RieszOperator", "Spike", "StatePath", "TimeGrid",
    "WienerPath", "appropriate_check", "build", "check_coercivity", "check_duality",
    "check_maximum_principle", "check_quasi_skew", "compare_adjoints", "cost", "eval_T", "eval_T_eps",
    "expansion_check", "hamiltonian", "lq_feedback_cost", "moment_sup", "mp_residual",
    "riesz_matrix", "sample_ensemble", "skew_decompose", "solve_adjoint_regression",
    "solve_adjoint_riccati", "solve_first_variation", "solve_linear", "solve_riccati",
    "solve_second_variation", "solve_state", "solve_z", "solve_z_eps", "spike_control",
]
