"""
Mixtures of multivariate Gaussian return models.

A :class:`MixtureModel` is a convex combination of Gaussian components. The
solver only ever needs the law of a portfolio return ``u^T w``, which under a
mixture is again a (univariate) mixture with the same weights; see
:func:`project`.

Fitting is moment matching: a mixture is searched whose closed-form ER, SD, SK,
KU and correlations reproduce a target :class:`MomentSummary`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import optimize, stats

from .econometrics import MomentSummary
from .errors import InfeasibleError, InputError

__all__ = [
    "GaussianComponent",
    "MixtureModel",
    "UnivariateMixture",
    "FitConfig",
    "density",
    "sample",
    "mixture_moments",
    "project",
    "is_unimodal",
    "fit_moment_matching",
    "moment_fit_error",
]

logger = logging.getLogger(__name__)

WEIGHT_TOL = 1e-12


def psd_factor(cov: np.ndarray) -> np.ndarray:
    """A matrix ``L`` with ``L L^T = cov`` that also works for singular PSD input."""
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(cov)
        return vecs * np.sqrt(np.clip(vals, 0.0, None))


@dataclass(frozen=True)
class GaussianComponent:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        m = mean.shape[0]
        if cov.shape != (m, m):
            raise InputError(f"covariance shape {cov.shape} does not match mean length {m}")
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * max(1.0, np.abs(cov).max())):
            raise InputError("component covariance is not symmetric")
        cov = 0.5 * (cov + cov.T)
        if m and np.linalg.eigvalsh(cov).min() < -1e-10 * max(1.0, np.abs(cov).max()):
            raise InputError("component covariance is not positive semi-definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @classmethod
    def from_sd_corr(cls, mean, sd, corr) -> "GaussianComponent":
        sd = np.asarray(sd, dtype=float)
        return cls(mean=mean, cov=np.outer(sd, sd) * np.asarray(corr, dtype=float))


@dataclass(frozen=True)
class MixtureModel:
    weights: np.ndarray
    components: tuple
    labels: Sequence[str] = ()

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        comps = tuple(self.components)
        if len(comps) == 0 or w.shape != (len(comps),):
            raise InputError("need one weight per component")
        if np.any(w < 0) or np.any(w > 1) or abs(w.sum() - 1.0) > WEIGHT_TOL:
            raise InputError(f"mixture weights must lie in [0, 1] and sum to 1 (got {w.tolist()})")
        m = comps[0].mean.shape[0]
        if any(c.mean.shape[0] != m for c in comps):
            raise InputError("all components must share the asset dimension")
        labels = list(self.labels) or [f"asset{i + 1}" for i in range(m)]
        if len(labels) != m:
            raise InputError(f"{len(labels)} labels for a {m}-asset model")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "labels", labels)

    @property
    def m(self) -> int:
        return self.components[0].mean.shape[0]

    @property
    def k(self) -> int:
        return len(self.components)

    @property
    def means(self) -> np.ndarray:
        return np.array([c.mean for c in self.components])

    @property
    def covs(self) -> np.ndarray:
        return np.array([c.cov for c in self.components])

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def covariance(self) -> np.ndarray:
        """Overall covariance: within-component plus between-component spread."""
        mu = self.mean()
        dev = self.means - mu
        cov = np.einsum("k,kij->ij", self.weights, self.covs) + np.einsum("k,ki,kj->ij", self.weights, dev, dev)
        return 0.5 * (cov + cov.T)


@dataclass(frozen=True)
class UnivariateMixture:
    """Law of a scalar return: weights, per-component means and standard deviations."""

    weights: np.ndarray
    means: np.ndarray
    sds: np.ndarray

    def __post_init__(self):
        for name in ("weights", "means", "sds"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        if not (self.weights.shape == self.means.shape == self.sds.shape):
            raise InputError("weights, means and sds must have equal length")
        if abs(self.weights.sum() - 1.0) > 1e-9 or np.any(self.sds < 0):
            raise InputError("invalid univariate mixture")

    def pdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)[..., None]
        return np.sum(self.weights * stats.norm.pdf(x, self.means, self.sds), axis=-1)

    def cdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)[..., None]
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(self.sds > 0, (x - self.means) / np.where(self.sds > 0, self.sds, 1.0),
                         np.where(x >= self.means, np.inf, -np.inf))
        return np.sum(self.weights * stats.norm.cdf(z), axis=-1)

    def mean(self) -> float:
        return float(self.weights @ self.means)

    def variance(self) -> float:
        mu = self.mean()
        return float(self.weights @ (self.sds ** 2 + (self.means - mu) ** 2))


@dataclass
class FitConfig:
    k_components: int = 2
    max_iterations: int = 20000
    tolerance: float = 1e-14
    require_unimodal: bool = True
    seed: int = 0
    n_starts: int = 4
    n_restarts: int = 4

    def __post_init__(self):
        if self.k_components < 1:
            raise InputError("k_components must be >= 1")
        if self.n_starts < 1 or self.max_iterations < 1:
            raise InputError("n_starts and max_iterations must be positive")


def density(mm: MixtureModel, y) -> float:
    y = np.asarray(y, dtype=float)
    if y.shape[-1:] != (mm.m,):
        raise InputError(f"point of dimension {y.shape[-1:]} for a {mm.m}-asset model")
    total = 0.0
    for w, c in zip(mm.weights, mm.components):
        total = total + w * stats.multivariate_normal.pdf(y, mean=c.mean, cov=c.cov, allow_singular=True)
    return total


def sample(mm: MixtureModel, n: int, seed=None) -> np.ndarray:
    """``n`` i.i.d. draws as an ``n x m`` matrix; reproducible for a given seed."""
    if n < 1:
        raise InputError("n must be >= 1")
    rng = np.random.default_rng(seed)
    which = rng.choice(mm.k, size=n, p=mm.weights)
    z = rng.standard_normal((n, mm.m))
    out = np.empty((n, mm.m))
    for i, c in enumerate(mm.components):
        sel = which == i
        out[sel] = c.mean + z[sel] @ psd_factor(c.cov).T
    return out


def _univariate_moments(weights, means, variances):
    """Closed-form mean, variance, skewness and kurtosis of univariate mixtures.

    ``means`` and ``variances`` are ``(K, m)``; returns four ``m``-vectors.
    """
    mu = weights @ means
    d = means - mu
    c2 = weights @ (d ** 2 + variances)
    c3 = weights @ (d ** 3 + 3.0 * d * variances)
    c4 = weights @ (d ** 4 + 6.0 * d ** 2 * variances + 3.0 * variances ** 2)
    return mu, c2, c3, c4


def mixture_moments(mm: MixtureModel, periods_per_year: Optional[int] = None) -> MomentSummary:
    variances = np.array([np.diag(c.cov) for c in mm.components])
    mu, c2, c3, c4 = _univariate_moments(mm.weights, mm.means, variances)
    cov = mm.covariance()
    sd = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    ok = c2 > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        sk = np.where(ok, c3 / c2 ** 1.5, np.nan)
        ku = np.where(ok, c4 / c2 ** 2, np.nan)
        corr = cov / np.outer(sd, sd)
    corr[~ok, :] = 0.0
    corr[:, ~ok] = 0.0
    np.fill_diagonal(corr, 1.0)
    return MomentSummary(er=mu, sd=sd, sk=sk, ku=ku, corr=np.clip(corr, -1, 1), cov=cov, labels=mm.labels,
                         periods_per_year=periods_per_year)


def project(mm: MixtureModel, u) -> UnivariateMixture:
    u = np.asarray(u, dtype=float)
    if u.shape != (mm.m,) or not np.all(np.isfinite(u)):
        raise InputError("allocation must be a finite vector with one entry per asset")
    means = mm.means @ u
    var = np.einsum("i,kij,j->k", u, mm.covs, u)
    return UnivariateMixture(weights=mm.weights.copy(), means=means, sds=np.sqrt(np.clip(var, 0.0, None)))


def project_many(mm: MixtureModel, U: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`project` for a ``(n, m)`` batch: returns ``(n, K)`` means and sds."""
    U = np.atleast_2d(np.asarray(U, dtype=float))
    means = U @ mm.means.T
    var = np.einsum("ni,kij,nj->nk", U, mm.covs, U)
    return means, np.sqrt(np.clip(var, 0.0, None))


def _count_modes(weights, means, sds, max_points: int = 2_000_000) -> int:
    spread = 6.0 * sds.max()
    lo, hi = means.min() - spread, means.max() + spread
    step = sds.min() / 20.0
    n = int(np.ceil((hi - lo) / step)) + 1
    if n > max_points:
        raise InputError(f"unimodality grid would need {n} points; component scales too disparate")
    x = np.linspace(lo, hi, max(n, 3))[:, None]
    z = (x - means) / sds
    # density derivative up to the positive factor 1/sqrt(2 pi)
    deriv = (np.exp(-0.5 * z * z) * z) @ (-weights / sds ** 2)
    s = np.sign(deriv)
    s = s[s != 0]
    return int(np.count_nonzero((s[:-1] > 0) & (s[1:] < 0)))


def is_unimodal(um: UnivariateMixture) -> bool:
    """True iff the density has exactly one local maximum.

    Counts +/- sign changes of the analytic density derivative on a grid over
    ``[min mean - 6 max sd, max mean + 6 max sd]`` with step ``min sd / 20``.
    """
    keep = um.weights > 0
    w, mu, sd = um.weights[keep], um.means[keep], um.sds[keep]
    if np.any(sd <= 0):
        raise InputError("is_unimodal requires strictly positive component sds")
    if w.size == 1:
        return True
    return _count_modes(w, mu, sd) == 1


# ---------------------------------------------------------------------------
# Moment-matching fit
# ---------------------------------------------------------------------------

def _moment_vector(ms_er, ms_sd, ms_sk, ms_ku, corr) -> np.ndarray:
    iu = np.triu_indices(len(ms_er), 1)
    return np.concatenate([ms_er, ms_sd, ms_sk, ms_ku, corr[iu]])


def moment_fit_error(mm: MixtureModel, target: MomentSummary) -> float:
    """Sum of squared deviations over ER, SD, SK, KU per asset and upper-triangle correlations.

    Assets whose target SK/KU are undefined contribute only ER and SD terms.
    """
    got = mixture_moments(mm)
    a = _moment_vector(got.er, got.sd, got.sk, got.ku, got.corr)
    b = _moment_vector(target.er, target.sd, target.sk, target.ku, target.corr)
    keep = np.isfinite(b)
    diff = np.where(np.isfinite(a[keep]), a[keep] - b[keep], 1e6)
    return float(diff @ diff)


def _check_target(target: MomentSummary) -> None:
    problems = []
    if np.any(target.sd < 0) or not np.all(np.isfinite(target.sd)) or not np.all(np.isfinite(target.er)):
        problems.append("ER/SD must be finite with SD >= 0")
    defined = np.isfinite(target.sk) & np.isfinite(target.ku)
    bad = defined & (target.ku < target.sk ** 2 + 1.0)
    for j in np.flatnonzero(bad):
        problems.append(f"{target.labels[j]}: kurtosis {target.ku[j]:g} < skewness^2 + 1 = {target.sk[j] ** 2 + 1:g}")
    corr = target.corr
    if not np.allclose(corr, corr.T, atol=1e-12) or np.any(np.abs(corr) > 1 + 1e-12):
        problems.append("correlation matrix must be symmetric with entries in [-1, 1]")
    elif np.linalg.eigvalsh(corr).min() < -1e-10:
        problems.append("correlation matrix is not positive semi-definite")
    if problems:
        raise InfeasibleError("infeasible moment targets: " + "; ".join(problems))


class _Param:
    """Unconstrained parameter vector <-> mixture parameters.

    Weights come from a softmax of K-1 logits (first logit pinned at 0), means
    are offsets in units of the target SD, and each covariance is
    ``D L L^T D`` with ``L`` lower triangular and ``D`` the target SDs, so
    every candidate is PSD by construction.
    """

    def __init__(self, target: MomentSummary, k: int):
        self.k = k
        self.m = target.m
        self.center = target.er.copy()
        sd = target.sd.copy()
        floor = 1e-6 * max(sd.max(), 1e-12)
        self.scale = np.maximum(sd, floor)
        self.tril = np.tril_indices(self.m)
        self.n_chol = len(self.tril[0])
        self.size = (k - 1) + k * self.m + k * self.n_chol

    def unpack(self, theta):
        k, m = self.k, self.m
        logits = np.concatenate([[0.0], theta[: k - 1]])
        w = np.exp(logits - logits.max())
        w /= w.sum()
        pos = k - 1
        means = self.center + theta[pos: pos + k * m].reshape(k, m) * self.scale
        pos += k * m
        chol = np.zeros((k, m, m))
        chol[:, self.tril[0], self.tril[1]] = theta[pos:].reshape(k, self.n_chol)
        L = chol * self.scale[None, :, None]
        covs = L @ np.transpose(L, (0, 2, 1))
        return w, means, covs

    def pack(self, w, means, covs):
        logits = np.log(np.clip(w, 1e-300, None))
        logits = logits[1:] - logits[0]
        offs = ((means - self.center) / self.scale).ravel()
        chols = []
        for c in covs:
            d = c / np.outer(self.scale, self.scale)
            chols.append(psd_factor_lower(d)[self.tril])
        return np.concatenate([logits, offs, np.concatenate(chols)])

    def model(self, theta, labels) -> MixtureModel:
        w, means, covs = self.unpack(theta)
        w = w / w.sum()
        comps = tuple(GaussianComponent(mu, 0.5 * (c + c.T)) for mu, c in zip(means, covs))
        return MixtureModel(weights=w, components=comps, labels=labels)


def psd_factor_lower(cov: np.ndarray) -> np.ndarray:
    """Lower-triangular ``L`` with ``L L^T = cov`` (jitter added if singular)."""
    m = cov.shape[0]
    jitter = 0.0
    for _ in range(12):
        try:
            return np.linalg.cholesky(cov + jitter * np.eye(m))
        except np.linalg.LinAlgError:
            jitter = max(jitter * 10.0, 1e-12 * max(1.0, np.trace(cov) / m))
    raise InputError("could not factor covariance")


def fit_moment_matching(target: MomentSummary, cfg: Optional[FitConfig] = None):
    """Fit a K-component mixture to per-period target moments.

    Multi-start Nelder-Mead over the unconstrained parameterisation of
    :class:`_Param`; each start is restarted from its incumbent until no
    further progress. Non-unimodal marginals are penalised when
    ``cfg.require_unimodal`` is set and the winner is re-checked with
    :func:`is_unimodal`.

    Returns ``(model, fit_error)``.
    """
    cfg = cfg or FitConfig()
    if target.annualized:
        target = target.to_per_period()
    _check_target(target)
    k, m = cfg.k_components, target.m
    par = _Param(target, k)
    b = _moment_vector(target.er, target.sd, target.sk, target.ku, target.corr)
    keep = np.isfinite(b)
    b = b[keep]
    iu = np.triu_indices(m, 1)

    def moments_of(theta):
        w, means, covs = par.unpack(theta)
        variances = np.diagonal(covs, axis1=1, axis2=2)
        mu, c2, c3, c4 = _univariate_moments(w, means, variances)
        dev = means - mu
        cov = np.einsum("k,kij->ij", w, covs) + np.einsum("k,ki,kj->ij", w, dev, dev)
        sd = np.sqrt(np.clip(c2, 1e-300, None))
        corr = cov / np.outer(sd, sd)
        return w, means, variances, np.concatenate([mu, sd, c3 / sd ** 3, c4 / sd ** 4, corr[iu]])

    def objective(theta):
        w, means, variances, a = moments_of(theta)
        r = a[keep] - b
        val = float(r @ r)
        if not np.isfinite(val):
            return 1e12
        if cfg.require_unimodal and k > 1 and val < 1e2:
            sds = np.sqrt(variances)
            if np.any(sds < 1e-300):
                return val + 1.0
            for j in range(m):
                try:
                    if _count_modes(w, means[:, j], sds[:, j], max_points=200_000) != 1:
                        return val + 1.0
                except InputError:
                    return val + 1.0
        return val

    rng = np.random.default_rng(cfg.seed)
    corr0 = target.corr.copy()
    base_chol = psd_factor_lower(corr0)
    best_theta, best_val = None, np.inf
    for start in range(cfg.n_starts):
        if start == 0:
            w0 = np.full(k, 1.0 / k)
            means0 = np.tile(target.er, (k, 1))
            covs0 = np.tile(np.outer(par.scale, par.scale) * corr0, (k, 1, 1))
            theta0 = par.pack(w0, means0, covs0)
            if k > 1:
                theta0 = theta0 + 0.05 * rng.standard_normal(par.size)
        else:
            logits = rng.normal(0.0, 1.5, k - 1)
            offs = rng.normal(0.0, 0.5, k * m)
            chol = np.concatenate([(base_chol * rng.uniform(0.5, 1.5, (m, 1)))[par.tril] for _ in range(k)])
            theta0 = np.concatenate([logits, offs, chol])
        theta, val = theta0, objective(theta0)
        for _ in range(cfg.n_restarts):
            res = optimize.minimize(objective, theta, method="Nelder-Mead",
                                    options={"maxiter": cfg.max_iterations, "maxfev": cfg.max_iterations,
                                             "xatol": 1e-12, "fatol": cfg.tolerance, "adaptive": True})
            improved = val - res.fun
            if res.fun <= val:
                theta, val = res.x, res.fun
            if improved <= cfg.tolerance or val <= cfg.tolerance:
                break
        logger.debug("fit start %d: error %.3e", start, val)
        if val < best_val:
            best_theta, best_val = theta, val

    model = par.model(best_theta, target.labels)
    err = moment_fit_error(model, target)
    if cfg.require_unimodal and k > 1:
        marg = [UnivariateMixture(model.weights, model.means[:, j], np.sqrt(model.covs[:, j, j]))
                for j in range(m)]
        if not all(np.all(u.sds > 0) and is_unimodal(u) for u in marg):
            raise InfeasibleError("no unimodal mixture found for these targets; relax require_unimodal")
    return model, err
