"""
Run configuration: one YAML document with nested sections.

Unknown keys are rejected so that typos fail loudly. :meth:`RunConfig.to_dict`
returns the fully resolved configuration (defaults filled in, paths made
absolute); summaries embed it so a run can be repeated from its own output
(``odaa solve --config out/solve_summary.json``).

Schema (all sections optional unless a command needs them)::

    data:        {prices: PATH | returns: PATH, periods_per_year: 52}
    model:       PATH                    # mixture fixture (JSON)
    horizon:     104
    x0:          1.0
    targets:     [{stages: [1, 103], lower: 0.0}, {stages: [104, 104], lower: 1.1449, upper: null}]
    risk:        {long_only, budget, sigma_max | sigma_max_annual | var: {level, horizon_months, multiplier},
                  lower, upper}
    solver:      SolverConfig fields
    fit:         FitConfig fields plus target: PATH (moment table CSV)
    analysis:    {cl: 0.95, n: null}
    monte_carlo: {n_paths, seed, block_size, histogram_bins, histogram_range}
    frontier:    {n_points, moments: PATH, annualized, mode, n_paths, seed}
    output:      DIR
"""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .allocation import ConstraintSet
from .errors import InputError
from .mixture import FitConfig
from .reachability import SolverConfig, TargetSequence, per_period_sigma, var_to_sigma_max

__all__ = ["RunConfig", "load_config", "DataConfig", "RiskConfig", "MonteCarloConfig", "FrontierConfig",
           "AnalysisConfig", "TargetRange", "resolve_data_file"]

PACKAGE_DATA = Path(__file__).resolve().parent / "data"


@dataclass
class DataConfig:
    prices: Optional[str] = None
    returns: Optional[str] = None
    periods_per_year: int = 52


@dataclass
class TargetRange:
    stages: tuple
    lower: float = 0.0
    upper: Optional[float] = None

    def __post_init__(self):
        st = tuple(int(s) for s in self.stages)
        if len(st) != 2:
            raise InputError(f"target stages must be [first, last], got {self.stages}")
        self.stages = st


@dataclass
class RiskConfig:
    long_only: bool = True
    budget: bool = True
    sigma_max: Optional[float] = None
    sigma_max_annual: Optional[float] = None
    var: Optional[dict] = None
    lower: Optional[list] = None
    upper: Optional[list] = None

    def __post_init__(self):
        given = [k for k in ("sigma_max", "sigma_max_annual", "var") if getattr(self, k) is not None]
        if len(given) > 1:
            raise InputError(f"risk: give only one of sigma_max, sigma_max_annual, var (got {given})")
        if self.var is not None:
            unknown = set(self.var) - {"level", "horizon_months", "multiplier"}
            if unknown or "level" not in self.var:
                raise InputError("risk.var needs 'level' and optionally 'horizon_months', 'multiplier'")

    def annual_sigma(self, periods_per_year: int) -> Optional[float]:
        if self.var is not None:
            return var_to_sigma_max(float(self.var["level"]), float(self.var.get("horizon_months", 1.0)),
                                    float(self.var.get("multiplier", 2.3263)))
        if self.sigma_max_annual is not None:
            return float(self.sigma_max_annual)
        if self.sigma_max is not None:
            return float(self.sigma_max) * np.sqrt(periods_per_year)
        return None

    def constraints(self, periods_per_year: int, annual: bool = False) -> ConstraintSet:
        sig = self.annual_sigma(periods_per_year)
        if sig is not None and not annual:
            sig = float(self.sigma_max) if self.sigma_max is not None else per_period_sigma(sig, periods_per_year)
        return ConstraintSet(budget=self.budget, long_only=self.long_only, sigma_max=sig,
                             lower=self.lower, upper=self.upper)


@dataclass
class MonteCarloConfig:
    n_paths: int = 1_000_000
    seed: int = 0
    block_size: int = 8192
    histogram_bins: int = 60
    histogram_range: Optional[list] = None


@dataclass
class FrontierConfig:
    n_points: int = 41
    moments: Optional[str] = None
    annualized: bool = True
    mode: str = "constant_mix"
    n_paths: int = 200_000
    seed: int = 0


@dataclass
class AnalysisConfig:
    cl: float = 0.95
    n: Optional[int] = None


def _build(cls, section: Optional[dict], name: str):
    section = section or {}
    if not isinstance(section, dict):
        raise InputError(f"section '{name}' must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - names
    if unknown:
        raise InputError(f"unknown key(s) in '{name}': {sorted(unknown)}")
    try:
        return cls(**section)
    except TypeError as exc:
        raise InputError(f"section '{name}': {exc}") from None


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: Optional[str] = None
    horizon: Optional[int] = None
    x0: float = 1.0
    targets: list = field(default_factory=list)
    risk: RiskConfig = field(default_factory=RiskConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    fit_target: Optional[str] = None
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    monte_carlo: MonteCarloConfig = field(default_factory=MonteCarloConfig)
    frontier: FrontierConfig = field(default_factory=FrontierConfig)
    output: str = "out"

    TOP_KEYS = ("data", "model", "horizon", "x0", "targets", "risk", "solver", "fit", "analysis", "monte_carlo",
                "frontier", "output")

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path = Path(".")) -> "RunConfig":
        if "config" in d and isinstance(d["config"], dict) and "header" in d:
            d = d["config"]  # a summary document
        unknown = set(d) - set(cls.TOP_KEYS)
        if unknown:
            raise InputError(f"unknown top-level key(s): {sorted(unknown)}")
        fit_section = dict(d.get("fit") or {})
        fit_target = fit_section.pop("target", None)
        cfg = cls(
            data=_build(DataConfig, d.get("data"), "data"),
            model=d.get("model"),
            horizon=d.get("horizon"),
            x0=float(d.get("x0", 1.0)),
            targets=[_build(TargetRange, t, "targets[]") for t in (d.get("targets") or [])],
            risk=_build(RiskConfig, d.get("risk"), "risk"),
            solver=_build(SolverConfig, d.get("solver"), "solver"),
            fit=_build(FitConfig, fit_section, "fit"),
            fit_target=fit_target,
            analysis=_build(AnalysisConfig, d.get("analysis"), "analysis"),
            monte_carlo=_build(MonteCarloConfig, d.get("monte_carlo"), "monte_carlo"),
            frontier=_build(FrontierConfig, d.get("frontier"), "frontier"),
            output=str(d.get("output", "out")),
        )
        cfg._resolve_paths(Path(base_dir))
        if cfg.horizon is not None and int(cfg.horizon) < 1:
            raise InputError("horizon must be >= 1")
        return cfg

    def _resolve_paths(self, base: Path) -> None:
        self.data.prices = resolve_data_file(self.data.prices, base)
        self.data.returns = resolve_data_file(self.data.returns, base)
        self.model = resolve_data_file(self.model, base)
        self.fit_target = resolve_data_file(self.fit_target, base)
        self.frontier.moments = resolve_data_file(self.frontier.moments, base)
        out = Path(self.output)
        self.output = str(out if out.is_absolute() else (base / out).resolve())

    def target_sequence(self) -> TargetSequence:
        if self.horizon is None or not self.targets:
            raise InputError("config needs 'horizon' and 'targets' for this command")
        ranges = [(t.stages[0], t.stages[1], t.lower, np.inf if t.upper is None else t.upper) for t in self.targets]
        return TargetSequence.from_ranges(int(self.horizon), ranges, x0=self.x0)

    def constraints(self, annual: bool = False) -> ConstraintSet:
        return self.risk.constraints(self.data.periods_per_year, annual=annual)

    def to_dict(self) -> dict:
        d = {
            "data": dataclasses.asdict(self.data),
            "model": self.model,
            "horizon": self.horizon,
            "x0": self.x0,
            "targets": [{"stages": list(t.stages), "lower": t.lower, "upper": t.upper} for t in self.targets],
            "risk": dataclasses.asdict(self.risk),
            "solver": {f.name: getattr(self.solver, f.name) for f in dataclasses.fields(self.solver)},
            "fit": {**dataclasses.asdict(self.fit), "target": self.fit_target},
            "analysis": dataclasses.asdict(self.analysis),
            "monte_carlo": dataclasses.asdict(self.monte_carlo),
            "frontier": dataclasses.asdict(self.frontier),
            "output": self.output,
        }
        d["solver"]["refine_steps"] = list(self.solver.refine_steps)
        return d


def resolve_data_file(path: Optional[str], base: Path) -> Optional[str]:
    """Absolute path for ``path``: relative to ``base``, else a packaged data file."""
    if path is None:
        return None
    p = Path(path)
    if p.is_absolute():
        return str(p)
    cand = (base / p).resolve()
    if cand.exists():
        return str(cand)
    packaged = PACKAGE_DATA / p.name
    if packaged.exists():
        return str(packaged)
    raise InputError(f"file '{path}' not found (looked in {base} and the packaged data)")


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads exponent floats without a dot (``1e-9``) as numbers."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
    |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
    |\.[0-9_]+(?:[eE][-+][0-9]+)?
    |[-+]?\.(?:inf|Inf|INF)
    |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."))


def load_config(path) -> RunConfig:
    """Read a YAML config (or a JSON summary holding a ``config`` section)."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"{path}: config file not found")
    try:
        doc = yaml.load(path.read_text(encoding="utf-8"), Loader=_Loader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f":{mark.line + 1}" if mark is not None else ""
        raise InputError(f"{path}{where}: invalid YAML ({getattr(exc, 'problem', exc)})") from None
    if not isinstance(doc, dict):
        raise InputError(f"{path}: expected a mapping at the top level")
    return RunConfig.from_dict(doc, base_dir=path.resolve().parent)
