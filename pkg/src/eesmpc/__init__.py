"""Scenario MPC with an empirical expected shortfall cap and risk certificates."""
from .certificates import (RiskBoundQuery, RiskCertificate, TestSizeQuery, certify_solution,
                           epsilon_bounds, required_test_samples)
from .exceptions import (DimensionError, NonTerminationError, NumericalError, ParameterError,
                         SolverLimitError)
from .plantmodel import (ConstraintSets, DemandProfile, FeasibleSet, LinearSystem, NetworkConfig,
                         TariffModel, condense, draw_scenarios, load_config)
from .riskmeasures import ees, empirical_es, empirical_var, k_largest_sum_lp, top_k_indices
from .sempc import SempcProblem, SempcSolution, closed_loop, solve_sempc
from .support import (SupportConfig, SupportResult, discover_support, filter_support_in_P,
                      find_support_box, support_in_feasible_set)

__version__ = "0.1.0"
