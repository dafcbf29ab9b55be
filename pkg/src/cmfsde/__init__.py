"""Conditional mean-field SDEs under partial observation: particle simulation
on a reference measure, law fixed points, adjoint-based policy gradients."""

from .control import (DEFAULT_BASIS, AdjointSolution, CostEstimate, GradientReport,
                      OptimizationResult, VariationalPair, conditional_mean_derivative, cost,
                      duality_check, evaluate, fd_gradient, optimize, smp_condition, smp_gradient,
                      solve_adjoint, solve_variational)
from .errors import (CapacityError, CmfError, ConfigError, DegeneracyError,
                     DerivativeMismatchError, InvalidInputError, NumericalBlowupError,
                     StaleLawError, ValidationFailure)
from .fixed_point import (FixedPointReport, apply_T, fixed_point_residual, picard_iterate,
                          solve_coupled)
from .model import (CoefficientSet, PathFeatureKernel, builtin_model, check_derivatives,
                    constant_model, validate_assumptions)
from .numerics import (EmpiricalLaw, MarginalLawFlow, RngStream, TimeGrid, quantile_mix,
                       wasserstein_1d, wasserstein_flow, wasserstein_pathspace)
from .oracles import kalman_bucy
from .policy import ControlPolicy, LinearPolicy, MixedPolicy, TablePolicy, perturb
from .simulator import (ScenarioEnsemble, conditional_moments, fkk_propagate, martingale_check,
                        simulate, zakai_consistency)

__all__ = [name for name in dir() if not name.startswith("_")]
