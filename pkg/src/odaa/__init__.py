"""Probability-of-success dynamic asset allocation on non-Gaussian returns."""

__version__ = "0.1.0"

from .allocation import ConstraintSet, enumerate_lattice
from .econometrics import (MomentSummary, PriceSeries, RegionClassification, ReturnSeries, annualize,
                           classify_region, compute_moments, compute_returns, jarque_bera)
from .errors import InfeasibleError, InputError, NumericalError, OdaaError
from .markowitz import efficient_frontier, min_variance_for_target, select_max_success
from .mixture import FitConfig, GaussianComponent, MixtureModel, fit_moment_matching, mixture_moments
from .reachability import (Interval, PolicyMap, SolverConfig, StateGrid, TargetSequence, ValueFunction,
                           optimize_stage_node, solve, stage_value)
from .simulation import SimulationResult, simulate

__all__ = [
    "ConstraintSet", "enumerate_lattice", "MomentSummary", "PriceSeries", "RegionClassification", "ReturnSeries",
    "annualize", "classify_region", "compute_moments", "compute_returns", "jarque_bera", "InfeasibleError",
    "InputError", "NumericalError", "OdaaError", "efficient_frontier", "min_variance_for_target",
    "select_max_success", "FitConfig", "GaussianComponent", "MixtureModel", "fit_moment_matching",
    "mixture_moments", "Interval", "PolicyMap", "SolverConfig", "StateGrid", "TargetSequence", "ValueFunction",
    "optimize_stage_node", "solve", "stage_value", "SimulationResult", "simulate",
]
