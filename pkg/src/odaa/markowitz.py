"""
Mean-variance baseline: constrained minimum-variance portfolios, the efficient
frontier, and selection of the frontier portfolio with the best static
success probability.

The quadratic program

    min u^T S u   s.t.  u^T mu = r,  sum(u) = 1 (optional),  lo <= u <= hi

is solved exactly by enumerating active sets: for every assignment of assets
to {free, at lower bound, at upper bound}, the equality-constrained KKT system
is solved and the primal-feasible stationary point with the smallest variance
is kept. With ``3^m`` faces this is intended for the small universes used here
(``m <= 8``).
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linprog

from .allocation import FEAS_TOL, RISK_TOL, ConstraintSet
from .errors import InfeasibleError, InputError
from .mixture import MixtureModel
from .reachability import TargetSequence
from .simulation import DEFAULT_BLOCK, simulate_static_many

__all__ = [
    "FrontierPoint",
    "Selection",
    "min_variance_for_target",
    "global_min_variance",
    "feasible_return_range",
    "efficient_frontier",
    "select_max_success",
]

MAX_ASSETS = 8


@dataclass(frozen=True)
class FrontierPoint:
    target_return: float
    allocation: np.ndarray
    variance: float

    @property
    def sd(self) -> float:
        return float(np.sqrt(max(self.variance, 0.0)))


@dataclass(frozen=True)
class Selection:
    allocation: np.ndarray
    probability: float
    std_error: float
    index: int
    probabilities: np.ndarray


def _validate(mu, sigma):
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    m = mu.shape[0]
    if sigma.shape != (m, m):
        raise InputError(f"covariance shape {sigma.shape} does not match {m} returns")
    if not np.allclose(sigma, sigma.T, atol=1e-12 * max(1.0, np.abs(sigma).max())):
        raise InputError("covariance is not symmetric")
    if np.linalg.eigvalsh(0.5 * (sigma + sigma.T)).min() < -1e-10 * max(1.0, np.abs(sigma).max()):
        raise InputError("covariance is not positive semi-definite")
    if m > MAX_ASSETS:
        raise InputError(f"active-set enumeration supports at most {MAX_ASSETS} assets")
    return mu, 0.5 * (sigma + sigma.T)


def _qp(mu, sigma, cs: ConstraintSet, r_bar: Optional[float]):
    """Exact minimum of ``u^T S u`` over the polyhedron, optionally fixing ``u^T mu``."""
    m = mu.shape[0]
    lo, hi = cs.bounds(m)
    rows, rhs = [], []
    if cs.budget:
        rows.append(np.ones(m))
        rhs.append(1.0)
    if r_bar is not None:
        rows.append(mu)
        rhs.append(r_bar)
    A = np.array(rows).reshape(-1, m)
    b = np.array(rhs)
    best, best_var = None, np.inf
    states = [(0,) + ((1,) if np.isfinite(lo[j]) else ()) + ((2,) if np.isfinite(hi[j]) else ()) for j in range(m)]
    scale = max(1.0, np.abs(sigma).max())
    for state in product(*states):
        state = np.array(state)
        free = state == 0
        u = np.where(state == 1, lo, np.where(state == 2, hi, 0.0))
        nf = int(free.sum())
        if nf == 0:
            if len(b) and np.max(np.abs(A @ u - b)) > FEAS_TOL:
                continue
        else:
            Af = A[:, free]
            rhs_f = b - A[:, ~free] @ u[~free]
            S = sigma[np.ix_(free, free)]
            c = sigma[np.ix_(free, ~free)] @ u[~free]
            kkt = np.block([[2.0 * S, Af.T], [Af, np.zeros((len(b), len(b)))]])
            sol, *_ = np.linalg.lstsq(kkt, np.concatenate([-2.0 * c, rhs_f]), rcond=None)
            u = u.copy()
            u[free] = sol[:nf]
            # lstsq may return a non-solution for an inconsistent system
            resid = kkt @ sol - np.concatenate([-2.0 * c, rhs_f])
            if np.max(np.abs(resid)) > 1e-9 * scale * max(1.0, np.abs(sol).max()):
                continue
        if np.any(u < lo - FEAS_TOL) or np.any(u > hi + FEAS_TOL):
            continue
        if len(b) and np.max(np.abs(A @ u - b)) > FEAS_TOL:
            continue
        u = np.clip(u, lo, hi)
        var = float(u @ sigma @ u)
        if var < best_var - 1e-15 * scale or (abs(var - best_var) <= 1e-15 * scale and best is not None
                                                and tuple(u) < tuple(best)):
            best, best_var = u, var
    return best, best_var


def global_min_variance(mu, sigma, cs: ConstraintSet) -> FrontierPoint:
    mu, sigma = _validate(mu, sigma)
    u, var = _qp(mu, sigma, cs, None)
    if u is None:
        raise InfeasibleError("no allocation satisfies the budget/bound constraints")
    if cs.sigma_max is not None and np.sqrt(max(var, 0.0)) > cs.sigma_max + RISK_TOL:
        raise InfeasibleError(f"risk budget {cs.sigma_max:.6g} is below the minimum attainable sd {np.sqrt(var):.6g}")
    return FrontierPoint(float(u @ mu), u, max(var, 0.0))


def _max_return(mu, cs: ConstraintSet) -> float:
    m = mu.shape[0]
    lo, hi = cs.bounds(m)
    bounds = [(None if not np.isfinite(a) else a, None if not np.isfinite(c) else c) for a, c in zip(lo, hi)]
    res = linprog(-mu, A_eq=np.ones((1, m)) if cs.budget else None, b_eq=[1.0] if cs.budget else None,
                  bounds=bounds, method="highs")
    if res.status == 3:
        raise InputError("target return is unbounded above; add bounds")
    if not res.success:
        raise InfeasibleError("no allocation satisfies the budget/bound constraints")
    return float(-res.fun)


def feasible_return_range(mu, sigma, cs: ConstraintSet) -> tuple[float, float]:
    """``(r_min, r_max)``: the minimum-variance return and the largest attainable return.

    With a risk budget, ``r_max`` is the largest target whose minimum variance
    still fits inside it (found by bisection; variance is convex in the target).
    """
    mu, sigma = _validate(mu, sigma)
    gmv = global_min_variance(mu, sigma, cs)
    r_top = _max_return(mu, cs)
    if cs.sigma_max is None:
        return gmv.target_return, r_top
    cap = (cs.sigma_max + RISK_TOL) ** 2

    def fits(r):
        u, var = _qp(mu, sigma, cs, r)
        return u is not None and var <= cap

    if fits(r_top):
        return gmv.target_return, r_top
    a, b = gmv.target_return, r_top
    for _ in range(200):
        mid = 0.5 * (a + b)
        if fits(mid):
            a = mid
        else:
            b = mid
        if b - a <= 1e-13 * max(1.0, abs(b)):
            break
    return gmv.target_return, a


def min_variance_for_target(mu, sigma, r_bar: float, cs: ConstraintSet) -> FrontierPoint:
    mu, sigma = _validate(mu, sigma)
    u, var = _qp(mu, sigma, cs, float(r_bar))
    if u is None or (cs.sigma_max is not None and np.sqrt(max(var, 0.0)) > cs.sigma_max + RISK_TOL):
        r_min, r_max = feasible_return_range(mu, sigma, cs)
        raise InfeasibleError(f"target return {r_bar:.6g} outside the feasible range [{r_min:.6g}, {r_max:.6g}]")
    return FrontierPoint(float(r_bar), u, max(var, 0.0))


def efficient_frontier(mu, sigma, cs: ConstraintSet, n_points: int = 50) -> list[FrontierPoint]:
    """Minimum-variance portfolios at ``n_points`` evenly spaced targets in ``[r_min, r_max]``."""
    if n_points < 2:
        raise InputError("n_points must be >= 2")
    mu, sigma = _validate(mu, sigma)
    r_min, r_max = feasible_return_range(mu, sigma, cs)
    gmv = global_min_variance(mu, sigma, cs)
    out = []
    for i, r in enumerate(np.linspace(r_min, r_max, n_points)):
        if i == 0:
            out.append(FrontierPoint(float(r), gmv.allocation, gmv.variance))
            continue
        try:
            out.append(min_variance_for_target(mu, sigma, r, cs))
        except InfeasibleError:
            # bisection end point can sit a hair beyond the cap
            u, var = _qp(mu, sigma, ConstraintSet(cs.budget, cs.long_only, None, cs.lower, cs.upper), float(r))
            out.append(FrontierPoint(float(r), u, max(var, 0.0)))
    return out


def select_max_success(frontier: Sequence[FrontierPoint], mm: MixtureModel, ts: TargetSequence,
                       n_paths: int = 100_000, seed: int = 0, x0: float = 1.0, mode: str = "constant_mix",
                       block_size: int = DEFAULT_BLOCK) -> Selection:
    """Frontier allocation with the highest simulated success probability.

    All candidates are scored on the same simulated paths; ties go to the
    earlier (lower-return) point.
    """
    if not frontier:
        raise InputError("empty frontier")
    A = np.array([p.allocation for p in frontier])
    counts = simulate_static_many(A, mm, ts, x0=x0, n_paths=n_paths, seed=seed, mode=mode, block_size=block_size)
    probs = counts / n_paths
    i = int(np.argmax(probs))
    p = float(probs[i])
    return Selection(allocation=A[i], probability=p, std_error=float(np.sqrt(p * (1 - p) / n_paths)), index=i,
                     probabilities=probs)
