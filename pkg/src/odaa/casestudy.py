"""
Three-asset weekly case study: cash (C), government bonds (B) and equity (E).

Ships the two-component mixture fixture, the annual moment table it
was fitted to, and the two-year target/risk setup used by the scripts and the
acceptance tests.
"""

from __future__ import annotations

import numpy as np

from .allocation import ConstraintSet
from .econometrics import MomentSummary
from .mixture import GaussianComponent, MixtureModel
from .reachability import SolverConfig, TargetSequence, per_period_sigma, var_to_sigma_max

LABELS = ("C", "B", "E")
PERIODS_PER_YEAR = 52
HORIZON = 104
TERMINAL_TARGET = 1.07 ** 2
VAR_LEVEL = 0.07
VAR_HORIZON_MONTHS = 1.0
VAR_MULTIPLIER = 2.3263

MIX_WEIGHTS = (0.98, 0.02)
MEANS = (
    (0.000611, 0.001373, 0.002340),
    (0.000683, -0.016109, -0.017507),
)
SDS = (
    (0.000069, 0.005666, 0.019121),
    (0.000062, 0.006168, 0.052513),
)
CORR = (
    (1.0, 0.0633, 0.0207),
    (0.0633, 1.0, -0.0236),
    (0.0207, -0.0236, 1.0),
)

# annual ER/SD, per-period SK/KU
TABLE_ER = (0.0324, 0.0546, 0.1062)
TABLE_SD = (0.0, 0.0445, 0.1477)
TABLE_SK = (0.0, -0.46, -0.34)
TABLE_KU = (3.0, 4.25, 5.51)
TABLE_CORR = (
    (1.0, 0.0, 0.0),
    (0.0, 1.0, 0.0342),
    (0.0, 0.0342, 1.0),
)


def mixture_fixture() -> MixtureModel:
    comps = tuple(GaussianComponent.from_sd_corr(m, s, CORR) for m, s in zip(MEANS, SDS))
    return MixtureModel(weights=np.array(MIX_WEIGHTS), components=comps, labels=list(LABELS))


def moment_table() -> MomentSummary:
    return MomentSummary.from_table(TABLE_ER, TABLE_SD, TABLE_SK, TABLE_KU, TABLE_CORR, labels=list(LABELS),
                                    periods_per_year=PERIODS_PER_YEAR, annualized=True)


def sigma_max_annual() -> float:
    return var_to_sigma_max(VAR_LEVEL, VAR_HORIZON_MONTHS, VAR_MULTIPLIER)


def sigma_max_weekly() -> float:
    return per_period_sigma(sigma_max_annual(), PERIODS_PER_YEAR)


def targets(horizon: int = HORIZON, terminal: float = TERMINAL_TARGET) -> TargetSequence:
    return TargetSequence.terminal(horizon, terminal, x0=1.0)


def constraints() -> ConstraintSet:
    return ConstraintSet(budget=True, long_only=True, sigma_max=sigma_max_weekly())


def solver_config(**overrides) -> SolverConfig:
    return SolverConfig(**overrides)
