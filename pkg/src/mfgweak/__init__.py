"""Particle solver for mean-field games in the weak (Girsanov) formulation."""

__version__ = "0.1.0"

from .bsde import BsdeSolution, RegressionBasis, bmo_estimate, solve_backward
from .errors import *  # noqa: F401,F403
from .forward import (GaussianLaw, PathEnsemble, TimeGrid, VectorFieldSet, heun_stratonovich,
                      hormander_rank, ito_drift, malliavin_derivative, simulate_forward, tangent_flow)
from .master import (check_malliavin_representations, check_z_representation, density_diagnostic,
                     estimate_master_field, master_equation_residual, solve_tangent_bsde)
from .measure import EmpiricalMeasure, LawFlow, lions_derivative, wasserstein2
from .mfg import girsanov_weights, solve_equilibrium, strong_weak_consistency, weak_cost
from .model import (LagrangianModel, QuadraticCostModel, QuarticControlModel, driver,
                    optimal_control, verify_assumptions)

__all__ = [
    "*  # noqa: F401",
    "BsdeSolution",
    "EmpiricalMeasure",
    "F403",
    "GaussianLaw",
    "LagrangianModel",
    "LawFlow",
    "PathEnsemble",
    "QuadraticCostModel",
    "QuarticControlModel",
    "RegressionBasis",
    "TimeGrid",
    "VectorFieldSet",
    "bmo_estimate",
    "check_malliavin_representations",
    "check_z_representation",
    "density_diagnostic",
    "driver",
    "estimate_master_field",
    "girsanov_weights",
    "heun_stratonovich",
    "hormander_rank",
    "ito_drift",
    "lions_derivative",
    "malliavin_derivative",
    "master_equation_residual",
    "optimal_control",
    "simulate_forward",
    "solve_backward",
    "solve_equilibrium",
    "solve_tangent_bsde",
    "strong_weak_consistency",
    "tangent_flow",
    "verify_assumptions",
    "wasserstein2",
    "weak_cost",
]
