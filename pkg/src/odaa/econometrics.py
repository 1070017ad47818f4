"""
Return statistics for asset-class time series.

Computes simple returns from prices, the first four moments and the
correlation structure of a return panel, the Jarque-Bera statistic and the
nine-region skewness/kurtosis taxonomy used to flag non-Gaussian assets.

Moments use the population (1/n) estimators throughout. Skewness and kurtosis
of a zero-variance asset are undefined and reported as ``NaN``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .errors import InputError

__all__ = [
    "PriceSeries",
    "ReturnSeries",
    "MomentSummary",
    "RegionClassification",
    "REGION_NAMES",
    "compute_returns",
    "reconstruct_prices",
    "compute_moments",
    "jarque_bera",
    "jb_critical_value",
    "classify_region",
    "annualize",
]

MISSING = float("nan")

REGION_NAMES = {
    1: "negative skewed, leptokurtic",
    2: "gaussian-like skewed, leptokurtic",
    3: "positive skewed, leptokurtic",
    4: "negative skewed, mesokurtic",
    5: "gaussian-like skewed, mesokurtic",
    6: "positive skewed, mesokurtic",
    7: "negative skewed, platykurtic",
    8: "gaussian-like skewed, platykurtic",
    9: "positive skewed, platykurtic",
}


def _default_labels(m: int) -> list[str]:
    return [f"asset{i + 1}" for i in range(m)]


@dataclass(frozen=True)
class PriceSeries:
    prices: np.ndarray
    labels: Sequence[str] = ()
    periods_per_year: int = 52
    dates: Optional[Sequence[str]] = None

    def __post_init__(self):
        p = np.asarray(self.prices, dtype=float)
        if p.ndim == 1:
            p = p[:, None]
        if p.ndim != 2 or p.shape[0] < 2:
            raise InputError("price series needs at least two observations")
        if not np.all(np.isfinite(p)) or np.any(p <= 0):
            bad = np.argwhere(~(p > 0))
            raise InputError(f"prices must be finite and strictly positive (first offending row/col {tuple(bad[0])})")
        labels = list(self.labels) or _default_labels(p.shape[1])
        if len(labels) != p.shape[1]:
            raise InputError(f"{len(labels)} labels for {p.shape[1]} price columns")
        if self.periods_per_year < 1:
            raise InputError("periods_per_year must be a positive integer")
        object.__setattr__(self, "prices", p)
        object.__setattr__(self, "labels", labels)


@dataclass(frozen=True)
class ReturnSeries:
    returns: np.ndarray
    labels: Sequence[str] = ()
    periods_per_year: int = 52
    dates: Optional[Sequence[str]] = None

    def __post_init__(self):
        r = np.asarray(self.returns, dtype=float)
        if r.ndim == 1:
            r = r[:, None]
        if r.ndim != 2 or r.shape[0] < 1:
            raise InputError("return series must be a non-empty T x m matrix")
        if not np.all(np.isfinite(r)):
            raise InputError("returns must be finite")
        labels = list(self.labels) or _default_labels(r.shape[1])
        if len(labels) != r.shape[1]:
            raise InputError(f"{len(labels)} labels for {r.shape[1]} return columns")
        object.__setattr__(self, "returns", r)
        object.__setattr__(self, "labels", labels)

    @property
    def n_obs(self) -> int:
        return self.returns.shape[0]

    @property
    def m(self) -> int:
        return self.returns.shape[1]


@dataclass(frozen=True)
class MomentSummary:
    """Per-asset ER/SD/SK/KU with the covariance and correlation matrices.

    ``annualized`` only ever affects ER, SD and ``cov``; SK and KU are always
    per-period statistics.
    """

    er: np.ndarray
    sd: np.ndarray
    sk: np.ndarray
    ku: np.ndarray
    corr: np.ndarray
    cov: np.ndarray
    labels: Sequence[str] = ()
    periods_per_year: Optional[int] = None
    annualized: bool = False
    n_obs: Optional[int] = None

    def __post_init__(self):
        er = np.atleast_1d(np.asarray(self.er, dtype=float))
        m = er.shape[0]
        for name in ("sd", "sk", "ku"):
            v = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
            if v.shape != (m,):
                raise InputError(f"{name} has shape {v.shape}, expected ({m},)")
            object.__setattr__(self, name, v)
        for name in ("corr", "cov"):
            v = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            if v.shape != (m, m):
                raise InputError(f"{name} has shape {v.shape}, expected ({m}, {m})")
            object.__setattr__(self, name, v)
        object.__setattr__(self, "er", er)
        object.__setattr__(self, "labels", list(self.labels) or _default_labels(m))

    @property
    def m(self) -> int:
        return self.er.shape[0]

    @classmethod
    def from_table(cls, er, sd, sk, ku, corr, labels=(), periods_per_year=None,
                   annualized=False) -> "MomentSummary":
        """Build a summary from printed statistics; the covariance is diag(sd) corr diag(sd)."""
        sd = np.asarray(sd, dtype=float)
        corr = np.asarray(corr, dtype=float)
        return cls(er=er, sd=sd, sk=sk, ku=ku, corr=corr, cov=np.outer(sd, sd) * corr,
                   labels=labels, periods_per_year=periods_per_year, annualized=annualized)

    def to_per_period(self) -> "MomentSummary":
        """Invert :func:`annualize` (compound ER, sqrt-time SD)."""
        if not self.annualized:
            return self
        if not self.periods_per_year:
            raise InputError("periods_per_year is required to de-annualize")
        ppy = self.periods_per_year
        return replace(self, er=(1.0 + self.er) ** (1.0 / ppy) - 1.0, sd=self.sd / np.sqrt(ppy),
                       cov=self.cov / ppy, annualized=False)


@dataclass(frozen=True)
class RegionClassification:
    region: int
    lambda_sk: float
    lambda_ku: float
    cl: float
    n: int
    skew_class: str = field(default="")
    kurtosis_class: str = field(default="")

    @property
    def description(self) -> str:
        return REGION_NAMES[self.region]


def compute_returns(p: PriceSeries) -> ReturnSeries:
    """Simple returns ``(p[k+1] - p[k]) / p[k]`` per column."""
    prices = p.prices
    r = (prices[1:] - prices[:-1]) / prices[:-1]
    dates = list(p.dates[1:]) if p.dates is not None else None
    return ReturnSeries(returns=r, labels=p.labels, periods_per_year=p.periods_per_year, dates=dates)


def reconstruct_prices(r: ReturnSeries, initial: Sequence[float]) -> np.ndarray:
    """Chain returns forward from ``initial`` prices; the inverse of :func:`compute_returns`."""
    initial = np.asarray(initial, dtype=float).reshape(1, -1)
    growth = np.cumprod(1.0 + r.returns, axis=0)
    return np.vstack([initial, initial * growth])


def compute_moments(r: ReturnSeries) -> MomentSummary:
    x = r.returns
    n = x.shape[0]
    if n < 4:
        raise InputError(f"at least 4 observations are required, got {n}")
    er = x.mean(axis=0)
    dev = x - er
    cov = dev.T @ dev / n
    cov = 0.5 * (cov + cov.T)
    var = np.diag(cov).copy()
    sd = np.sqrt(var)
    # relative to the scale of the data so that constant columns are caught
    # despite rounding in the mean
    scale = np.maximum(np.abs(er), np.max(np.abs(x), axis=0))
    degenerate = sd <= 1e-14 * np.maximum(scale, 1e-300)
    with np.errstate(divide="ignore", invalid="ignore"):
        m3 = (dev ** 3).mean(axis=0)
        m4 = (dev ** 4).mean(axis=0)
        sk = np.where(degenerate, MISSING, m3 / var ** 1.5)
        ku = np.where(degenerate, MISSING, m4 / var ** 2)
        corr = cov / np.outer(sd, sd)
    corr[degenerate, :] = 0.0
    corr[:, degenerate] = 0.0
    np.fill_diagonal(corr, 1.0)
    corr = np.clip(corr, -1.0, 1.0)
    return MomentSummary(er=er, sd=sd, sk=sk, ku=ku, corr=corr, cov=cov, labels=r.labels,
                         periods_per_year=r.periods_per_year, n_obs=n)


def jarque_bera(sk: float, ku: float, n: int) -> float:
    """JB statistic ``n/6 (sk^2 + (ku - 3)^2 / 4)``; chi-square(2) under normality."""
    if n < 4:
        raise InputError("Jarque-Bera needs n >= 4")
    return n / 6.0 * (sk ** 2 + (ku - 3.0) ** 2 / 4.0)


def jb_critical_value(confidence: float = 0.95) -> float:
    return float(stats.chi2.ppf(confidence, df=2))


def classify_region(sk: float, ku: float, cl: float = 0.95, n: int = 250) -> RegionClassification:
    """Place a (skewness, kurtosis) pair in one of the nine regions.

    Thresholds are ``sqrt(6 cl / (n - 1))`` for skewness and
    ``sqrt(24 cl / (n - 1))`` around 3 for kurtosis. A value exactly on a
    threshold belongs to the non-Gaussian class.
    """
    if cl <= 0 or n < 2:
        raise InputError("classify_region needs cl > 0 and n >= 2")
    if not (np.isfinite(sk) and np.isfinite(ku)):
        raise InputError("skewness/kurtosis undefined (zero-variance asset?)")
    lambda_sk = float(np.sqrt(6.0 * cl / (n - 1)))
    lambda_ku = float(np.sqrt(24.0 * cl / (n - 1)))

    if sk >= lambda_sk:
        col, skew_class = 2, "positive"
    elif sk <= -lambda_sk:
        col, skew_class = 0, "negative"
    else:
        col, skew_class = 1, "gaussian-like"

    if ku >= 3.0 + lambda_ku:
        row, kurt_class = 0, "leptokurtic"
    elif ku <= 3.0 - lambda_ku:
        row, kurt_class = 2, "platykurtic"
    else:
        row, kurt_class = 1, "mesokurtic"

    return RegionClassification(region=3 * row + col + 1, lambda_sk=lambda_sk, lambda_ku=lambda_ku,
                                cl=cl, n=n, skew_class=skew_class, kurtosis_class=kurt_class)


def annualize(ms: MomentSummary, periods_per_year: Optional[int] = None) -> MomentSummary:
    """Compound ER and sqrt-time scale SD/cov to annual units.

    SK and KU are carried through untouched; they stay per-period statistics.
    """
    if ms.annualized:
        return ms
    ppy = periods_per_year or ms.periods_per_year
    if not ppy:
        raise InputError("periods_per_year unknown; pass it explicitly")
    return replace(ms, er=(1.0 + ms.er) ** ppy - 1.0, sd=ms.sd * np.sqrt(ppy), cov=ms.cov * ppy,
                   periods_per_year=ppy, annualized=True)
