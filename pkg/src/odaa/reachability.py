"""
Backward dynamic programming for the maximal probability of staying inside a
sequence of target sets.

Portfolio value evolves as ``x_{k+1} = x_k (1 + u_k^T w_{k+1})`` with ``w``
drawn from a :class:`~odaa.mixture.MixtureModel`. Starting from the indicator
of the terminal set, each stage computes

    J_k(x) = max_u  integral over X_{k+1} of J_{k+1}(z) p(z | x, u) dz

on a log-uniform grid of portfolio values. ``J_{k+1}`` is piecewise linear
between nodes, so every segment integral is closed form in the Gaussian CDF and
PDF of the projected mixture.

Because the grid is log-uniform, the ratio ``z / x`` between a segment and a
node only depends on their index offset. The segment weights for one
allocation therefore form a convolution kernel, and all grid nodes are
evaluated at once with an FFT correlation.

Allocations are searched on a coarse weight lattice followed by local
refinement rounds on finer lattices (see :class:`SolverConfig`).
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np
from scipy import fft as sp_fft
from scipy.special import ndtr

from .allocation import ConstraintSet, enumerate_lattice, lattice_denominator, neighbourhood
from .errors import InfeasibleError, InputError, NumericalError
from .mixture import MixtureModel, project_many

__all__ = [
    "Interval",
    "TargetSequence",
    "StateGrid",
    "ValueFunction",
    "PolicyMap",
    "SolverConfig",
    "Solution",
    "terminal_values",
    "stage_value",
    "optimize_stage_node",
    "solve",
    "var_to_sigma_max",
    "per_period_sigma",
    "query_policy",
]

logger = logging.getLogger(__name__)

_SQRT_2PI = np.sqrt(2.0 * np.pi)
_BOUND_RTOL = 1e-12


# ---------------------------------------------------------------------------
# Problem data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Interval:
    lower: float = 0.0
    upper: float = np.inf

    def __post_init__(self):
        lo, hi = float(self.lower), float(self.upper)
        if np.isnan(lo) or np.isnan(hi) or lo > hi:
            raise InputError(f"empty target interval [{lo}, {hi}]")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return (x >= self.lower) & (x <= self.upper)

    def __str__(self):
        return f"[{self.lower:g}, {self.upper:g}]"


@dataclass(frozen=True)
class TargetSequence:
    """Target sets ``X_0 .. X_N``; ``sets[k]`` is the interval for stage ``k``."""

    sets: tuple

    def __post_init__(self):
        sets = tuple(s if isinstance(s, Interval) else Interval(*s) for s in self.sets)
        if len(sets) < 2:
            raise InputError("a target sequence needs X_0 and at least one more set (N >= 1)")
        object.__setattr__(self, "sets", sets)

    @property
    def horizon(self) -> int:
        return len(self.sets) - 1

    def __getitem__(self, k) -> Interval:
        return self.sets[k]

    @classmethod
    def from_ranges(cls, horizon: int, ranges, x0: float = 1.0) -> "TargetSequence":
        """Build ``X_1..X_N`` from ``(first_stage, last_stage, lower, upper)`` rows; ``X_0 = {x0}``.

        The stage ranges must cover ``1..horizon`` without overlap.
        """
        if horizon < 1:
            raise InputError("horizon must be >= 1")
        sets: list = [None] * (horizon + 1)
        sets[0] = Interval(x0, x0)
        for first, last, lower, upper in ranges:
            if not (1 <= first <= last <= horizon):
                raise InputError(f"stage range {first}..{last} outside 1..{horizon}")
            for k in range(first, last + 1):
                if sets[k] is not None:
                    raise InputError(f"stage {k} is covered by more than one target range")
                sets[k] = Interval(lower, np.inf if upper is None else upper)
        missing = [k for k in range(1, horizon + 1) if sets[k] is None]
        if missing:
            raise InputError(f"no target set for stages {missing[:5]}{'...' if len(missing) > 5 else ''}")
        return cls(tuple(sets))

    @classmethod
    def terminal(cls, horizon: int, lower: float, x0: float = 1.0) -> "TargetSequence":
        """``X_k = [0, inf)`` for intermediate stages and ``[lower, inf)`` at maturity."""
        ranges = [(horizon, horizon, lower, np.inf)]
        if horizon > 1:
            ranges.insert(0, (1, horizon - 1, 0.0, np.inf))
        return cls.from_ranges(horizon, ranges, x0)


@dataclass(frozen=True)
class StateGrid:
    """Log-uniform grid ``nodes[i] = x_lo * exp(i * log_step)``."""

    x_lo: float
    log_step: float
    size: int

    def __post_init__(self):
        if not (self.x_lo > 0 and self.log_step > 0 and self.size >= 2):
            raise InputError("grid needs x_lo > 0, log_step > 0 and at least 2 nodes")

    @classmethod
    def log_uniform(cls, lo: float, hi: float, n: int, anchor: Optional[float] = None) -> "StateGrid":
        """Grid over ``[lo, hi]``; if ``anchor`` is given the grid is shifted so it is a node."""
        if not (0 < lo < hi) or n < 2:
            raise InputError("need 0 < lo < hi and n >= 2")
        h = np.log(hi / lo) / (n - 1)
        if anchor is not None:
            j = int(np.round(np.log(anchor / lo) / h))
            lo = anchor * np.exp(-j * h)
        return cls(float(lo), float(h), int(n))

    @property
    def nodes(self) -> np.ndarray:
        return self.x_lo * np.exp(self.log_step * np.arange(self.size))

    @property
    def x_hi(self) -> float:
        return float(self.x_lo * np.exp(self.log_step * (self.size - 1)))

    def nearest(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Index of the nearest node and a flag for values outside the grid."""
        x = np.asarray(x, dtype=float)
        nodes = self.nodes
        outside = (x < nodes[0]) | (x > nodes[-1])
        j = np.clip(np.searchsorted(nodes, x), 1, self.size - 1)
        j = np.where(np.abs(x - nodes[j - 1]) <= np.abs(nodes[j] - x), j - 1, j)
        return j, outside


@dataclass(frozen=True)
class ValueFunction:
    stage: int
    grid: StateGrid
    values: np.ndarray

    def __call__(self, x) -> np.ndarray:
        """Piecewise-linear interpolation; 0 below the grid, last value above it."""
        x = np.asarray(x, dtype=float)
        nodes = self.grid.nodes
        out = np.interp(x, nodes, self.values, left=0.0, right=self.values[-1])
        return out


@dataclass(frozen=True)
class PolicyMap:
    """Optimal allocations ``allocations[k, i]`` for stage ``k`` at grid node ``i``."""

    grid: StateGrid
    allocations: np.ndarray
    labels: Sequence[str] = ()

    @property
    def horizon(self) -> int:
        return self.allocations.shape[0]

    @property
    def m(self) -> int:
        return self.allocations.shape[2]

    def lookup(self, k: int, x) -> tuple[np.ndarray, np.ndarray]:
        """Vectorised nearest-node lookup; returns ``(allocations, clamped)``."""
        if not 0 <= k < self.horizon:
            raise InputError(f"stage {k} outside 0..{self.horizon - 1}")
        j, outside = self.grid.nearest(x)
        return self.allocations[k][j], outside


@dataclass
class SolverConfig:
    grid_size: int = 4800
    x_lo: float = 0.4
    x_hi: float = 2.5
    coarse_step: float = 0.025
    refine_steps: tuple = (0.005, 0.001)
    refine_radius: Optional[int] = None
    n_sd: float = 8.0
    tie_tol: float = 1e-9
    anchor_grid: bool = True
    threads: int = 1
    chunk_size: int = 128
    kernel_cache_mb: float = 512.0

    def __post_init__(self):
        self.refine_steps = tuple(self.refine_steps)
        if self.grid_size < 2 or self.x_lo <= 0 or self.x_hi <= self.x_lo:
            raise InputError("grid needs grid_size >= 2 and 0 < x_lo < x_hi")
        if self.refine_radius is not None and self.refine_radius < 1:
            raise InputError("refine_radius must be >= 1")
        if self.n_sd <= 0 or self.tie_tol < 0 or self.threads < 1 or self.chunk_size < 1:
            raise InputError("n_sd, threads and chunk_size must be positive")
        steps = (self.coarse_step,) + self.refine_steps
        dens = [lattice_denominator(s) for s in steps]
        for a, b in zip(dens, dens[1:]):
            if b % a:
                raise InputError(f"refinement step 1/{b} must subdivide the previous step 1/{a}")

    @property
    def denominators(self) -> list[int]:
        return [lattice_denominator(s) for s in (self.coarse_step,) + self.refine_steps]


class Solution(NamedTuple):
    policy: PolicyMap
    values: list
    p_star: float
    info: dict = {}


# ---------------------------------------------------------------------------
# Closed-form segment integrals
# ---------------------------------------------------------------------------

def _norm_interval(alpha, beta):
    """``Phi(beta) - Phi(alpha)`` without cancellation in the upper tail."""
    return np.where(alpha > 0, ndtr(-alpha) - ndtr(-beta), ndtr(beta) - ndtr(alpha))


def _phi(z):
    return np.exp(-0.5 * z * z) / _SQRT_2PI


def _linear_weights(y0, y1, c0, c1, lam, means, sds):
    """Weights ``(a, b)`` of the endpoint values of a linear function on ``[y0, y1]``.

    ``a * f(y0) + b * f(y1)`` equals the integral of the linear interpolant
    against the density of ``Y = 1 + R`` over ``[c0, c1]``, where ``R`` is the
    univariate mixture ``(lam, means, sds)``. Arrays broadcast; the mixture
    axis is the last one of ``means``/``sds``. Zero-sd components are point
    masses, counted on the half-open interval ``[c0, c1)``.
    """
    y0, y1, c0, c1 = (np.asarray(v, dtype=float)[..., None] for v in (y0, y1, c0, c1))
    mu = 1.0 + means
    pos = sds > 0
    s = np.where(pos, sds, 1.0)
    with np.errstate(invalid="ignore", over="ignore"):
        alpha = (c0 - mu) / s
        beta = (c1 - mu) / s
        P = _norm_interval(alpha, beta)
        dphi = _phi(beta) - _phi(alpha)
        point = ((c0 <= mu) & (mu < c1)).astype(float)
        P = np.where(pos, P, point)
        dphi = np.where(pos, dphi, 0.0)
    width = y1 - y0
    a = ((y1 - mu) * P + s * dphi) / width
    b = ((mu - y0) * P - s * dphi) / width
    a = np.where(pos, a, (y1 - mu) * point / width)
    b = np.where(pos, b, (mu - y0) * point / width)
    return np.sum(lam * a, axis=-1), np.sum(lam * b, axis=-1)


def _upper_tail(t, lam, means, sds):
    """``P(1 + R >= t)`` for the univariate mixture."""
    t = np.asarray(t, dtype=float)[..., None]
    mu = 1.0 + means
    pos = sds > 0
    s = np.where(pos, sds, 1.0)
    p = np.where(pos, ndtr((mu - t) / s), (mu >= t).astype(float))
    return np.sum(lam * p, axis=-1)


def _kernel_weights(breaks, lam, means, sds, log_step=None, n_sd=None):
    """Linear weights for consecutive segments ``[breaks[d], breaks[d+1]]`` plus upper tails.

    Equivalent to :func:`_linear_weights` with ``c0 = y0`` and ``c1 = y1`` on
    every segment, but evaluates the CDF and PDF once per breakpoint. Returns
    ``(a, b, tail)`` where ``tail[d] = P(1 + R >= breaks[d])``. ``means`` and
    ``sds`` are ``(n, K)``.

    ``breaks`` must be geometric with ratio ``exp(log_step)``. When ``n_sd``
    is given each component is only evaluated within ``n_sd`` standard
    deviations of its mean; outside that window it contributes no segment
    mass and a tail of 1 below / 0 above.
    """
    n, K = means.shape
    nb = len(breaks)
    a = np.zeros((n, nb - 1))
    b = np.zeros((n, nb - 1))
    tail = np.zeros((n, nb))
    rows = np.arange(n)[:, None]
    log_b0 = np.log(breaks[0])
    for c in range(K):
        mu = 1.0 + means[:, c]
        sd = sds[:, c]
        pos = sd > 0
        if n_sd is None:
            j_lo = np.zeros(n, dtype=np.int64)
            width = nb
        else:
            lo = np.maximum(mu - n_sd * sd, breaks[0])
            hi = np.maximum(mu + n_sd * sd, breaks[0])
            j_lo = np.clip(np.floor((np.log(lo) - log_b0) / log_step).astype(np.int64) - 1, 0, nb - 1)
            j_hi = np.clip(np.ceil((np.log(hi) - log_b0) / log_step).astype(np.int64) + 1, 0, nb - 1)
            width = int(min(nb, max(2, (j_hi - j_lo).max() + 1)))
            j_lo = np.minimum(j_lo, nb - width)
        idx = j_lo[:, None] + np.arange(width)[None, :]
        t = breaks[idx]
        m_, s_ = mu[:, None], np.where(pos, sd, 1.0)[:, None]
        z = (t - m_) / s_
        small = ndtr(-np.abs(z))
        upper = np.where(z > 0, small, 1.0 - small)
        lower = np.where(z > 0, 1.0 - small, small)
        phi = _phi(z)
        above = z[:, :-1] > 0
        P = np.where(above, upper[:, :-1] - upper[:, 1:], lower[:, 1:] - lower[:, :-1])
        dphi = phi[:, 1:] - phi[:, :-1]
        point = pos[:, None]
        P = np.where(point, P, ((t[:, :-1] <= m_) & (m_ < t[:, 1:])).astype(float))
        dphi = np.where(point, dphi, 0.0)
        y0, y1 = t[:, :-1], t[:, 1:]
        width_y = y1 - y0
        a[rows, idx[:, :-1]] += lam[c] * ((y1 - m_) * P + s_ * dphi) / width_y
        b[rows, idx[:, :-1]] += lam[c] * ((m_ - y0) * P - s_ * dphi) / width_y
        up = np.where(point, upper, (m_ >= t).astype(float))
        tail += lam[c] * (np.arange(nb)[None, :] < j_lo[:, None])
        tail[rows, idx] += lam[c] * up
    return a, b, tail


def _extended_values(values: np.ndarray, nodes: np.ndarray, target: Interval) -> np.ndarray:
    """Replace nodes outside the target by the nearest inside node.

    Only the part of the interpolant over the target is ever integrated; this
    makes the terminal indicator integrate to exactly 1 over its set and keeps
    boundary segments from mixing in values from outside the target.
    """
    inside = _inside(nodes, target)
    if not inside.any():
        return values
    first = int(np.argmax(inside))
    last = int(len(inside) - 1 - np.argmax(inside[::-1]))
    out = values.copy()
    out[:first] = values[first]
    out[last + 1:] = values[last]
    return out


def _inside(x, target: Interval):
    tol = _BOUND_RTOL * np.maximum(1.0, np.abs(x))
    return (x >= target.lower - tol) & (x <= target.upper + tol)


def terminal_values(grid: StateGrid, target: Interval) -> ValueFunction:
    """Indicator of the terminal set at the grid nodes."""
    return ValueFunction(stage=-1, grid=grid, values=_inside(grid.nodes, target).astype(float))


def _clip_segments(nodes, target: Interval):
    """Per-segment integration limits ``[c0, c1]`` (empty where ``c0 >= c1``)."""
    z0, z1 = nodes[:-1], nodes[1:]
    c0 = np.maximum(z0, target.lower)
    c1 = np.minimum(z1, target.upper)
    return c0, c1


def stage_value(x: float, u, J_next: ValueFunction, X_next: Interval, mm: MixtureModel) -> float:
    """Integral of ``J_next`` over ``X_next`` against the law of ``x (1 + u^T w)``.

    Direct segment-by-segment evaluation (no truncation, no FFT). Accepts a
    single allocation or a ``(n, m)`` batch.
    """
    U = np.atleast_2d(np.asarray(u, dtype=float))
    single = np.ndim(u) == 1
    if not x > 0:
        raise InputError("stage_value needs x > 0")
    means, sds = project_many(mm, U)
    vals = _direct_values(np.array([x]), means, sds, mm.weights, J_next, X_next)[:, 0]
    if not np.all(np.isfinite(vals)):
        raise NumericalError(f"non-finite stage value at x={x}")
    vals = np.clip(vals, 0.0, 1.0)
    return float(vals[0]) if single else vals


def _direct_values(xs, means, sds, lam, J_next: ValueFunction, X_next: Interval) -> np.ndarray:
    """Stage values for candidates ``(n_u,)`` at points ``xs``; returns ``(n_u, len(xs))``."""
    nodes = J_next.grid.nodes
    Jt = _extended_values(J_next.values, nodes, X_next)
    c0, c1 = _clip_segments(nodes, X_next)
    live = np.flatnonzero(c1 > c0)
    out = np.zeros((means.shape[0], len(xs)))
    M, S = means[:, None, :], sds[:, None, :]
    for col, x in enumerate(xs):
        if live.size:
            a, b = _linear_weights(nodes[live] / x, nodes[live + 1] / x, c0[live] / x, c1[live] / x,
                                   lam, M, S)
            out[:, col] = a @ Jt[live] + b @ Jt[live + 1]
        top = max(nodes[-1], X_next.lower)
        if X_next.upper > nodes[-1] and np.isinf(X_next.upper):
            out[:, col] += Jt[-1] * _upper_tail(top / x, lam, means, sds)
    return out


# ---------------------------------------------------------------------------
# Allocation search
# ---------------------------------------------------------------------------

def _rank_order(coords: np.ndarray, risk_var: np.ndarray) -> np.ndarray:
    """Sort order by (risk variance, lexicographic weights)."""
    keys = [coords[:, j] for j in range(coords.shape[1] - 1, -1, -1)] + [risk_var]
    return np.lexsort(keys)


def _better_rank(var_a, coords_a, var_b, coords_b):
    """Elementwise: does candidate a precede b in (variance, lexicographic) order."""
    better = var_a < var_b
    same = var_a == var_b
    undecided = same.copy()
    for j in range(coords_a.shape[1]):
        better |= undecided & (coords_a[:, j] < coords_b[:, j])
        undecided &= coords_a[:, j] == coords_b[:, j]
    return better


class _Incumbent:
    """Running best allocation per evaluation point under the tie-break rule."""

    def __init__(self, n_points, m, tol):
        self.value = np.full(n_points, -np.inf)
        self.var = np.full(n_points, np.inf)
        self.coords = np.zeros((n_points, m), dtype=np.int64)
        self.tol = tol

    def merge(self, values: np.ndarray, coords: np.ndarray, var: np.ndarray) -> None:
        """``values`` is ``(c, n_points)`` for candidates already in rank order."""
        best = values.max(axis=0)
        idx = np.argmax(values >= best - self.tol, axis=0)
        cv, cvar, cc = values[idx, np.arange(values.shape[1])], var[idx], coords[idx]
        take = (cv > self.value + self.tol) | (
            (cv >= self.value - self.tol) & _better_rank(cvar, cc, self.var, self.coords))
        self.value = np.where(take, cv, self.value)
        self.var = np.where(take, cvar, self.var)
        self.coords[take] = cc[take]


def _search(evaluate: Callable, n_points: int, m: int, cs: ConstraintSet, risk_cov: np.ndarray,
            cfg: SolverConfig, chunk_size: Optional[int] = None, coarse: Optional[np.ndarray] = None):
    """Coarse lattice then local refinement, for ``n_points`` independent problems.

    ``evaluate(coords_fine)`` returns ``(len(coords), n_points)`` values for
    allocations ``coords_fine / K_fine``. Each refinement round searches a
    box around every incumbent (by default one previous step less one fine
    step, so an optimum cut off by the risk cap on the coarser lattice is
    still reachable); the union of those boxes is offered to every
    point, which keeps the candidate set identical across points and the
    resulting value function monotone wherever the exact one is.
    """
    dens = cfg.denominators
    k_fine = dens[-1]
    inc = _Incumbent(n_points, m, cfg.tie_tol)
    chunk = chunk_size or cfg.chunk_size

    def run(coords_fine):
        U = coords_fine / k_fine
        var = np.einsum("ni,ij,nj->n", U, risk_cov, U)
        order = _rank_order(coords_fine, var)
        coords_fine, var = coords_fine[order], var[order]
        for start in range(0, len(coords_fine), chunk):
            sl = slice(start, start + chunk)
            vals = evaluate(coords_fine[sl])
            inc.merge(vals, coords_fine[sl], var[sl])

    if coarse is None:
        coarse, _ = enumerate_lattice(m, cfg.coarse_step, cs, risk_cov)
    run(coarse * (k_fine // dens[0]))
    for prev, K in zip(dens[:-1], dens[1:]):
        radius = cfg.refine_radius if cfg.refine_radius is not None else max(1, K // prev - 1)
        offs = neighbourhood(np.zeros(m), radius, cs.budget)
        centres = np.unique(inc.coords // (k_fine // K), axis=0)
        cand = (centres[:, None, :] + offs[None, :, :]).reshape(-1, m)
        cand = np.unique(cand, axis=0)
        lo, hi = cs.bounds(m)
        ok = np.all(cand >= np.ceil(lo * K - 1e-9), axis=1) & np.all(cand <= np.floor(hi * K + 1e-9), axis=1)
        if cs.budget:
            ok &= cand.sum(axis=1) == K
        cand = cand[ok]
        cand = cand[cs.risk_ok(cand / K, risk_cov)]
        if len(cand):
            run(cand * (k_fine // K))
    return inc


def optimize_stage_node(x: float, J_next: ValueFunction, X_next: Interval, cs: ConstraintSet,
                        mm: MixtureModel, cfg: Optional[SolverConfig] = None):
    """Best allocation at a single portfolio value; returns ``(u, value)``."""
    cfg = cfg or SolverConfig()
    risk_cov = mm.covariance()
    k_fine = cfg.denominators[-1]

    def evaluate(coords):
        means, sds = project_many(mm, coords / k_fine)
        return _direct_values(np.array([float(x)]), means, sds, mm.weights, J_next, X_next)

    inc = _search(evaluate, 1, mm.m, cs, risk_cov, cfg, chunk_size=4096)
    value = float(inc.value[0])
    if not np.isfinite(value):
        raise NumericalError(f"non-finite stage value at x={x}")
    return inc.coords[0] / k_fine, float(np.clip(value, 0.0, 1.0))


# ---------------------------------------------------------------------------
# Grid-wide evaluation with FFT correlation
# ---------------------------------------------------------------------------

class _KernelBank:
    """Per-allocation correlation kernels on a fixed log-uniform grid.

    For offset ``d`` between a segment and a node the ratio interval is
    ``[e^{d h}, e^{(d+1) h}]`` with linear weights ``a(d)`` and ``b(d)``.
    Where neighbouring segments share their common node value, both weights
    fold into one kernel ``c(d) = a(d) + b(d - 1)``. Transformed kernels are
    kept in a store of fixed-size slots, recycled once unused for a stage.
    """

    def __init__(self, mm: MixtureModel, grid: StateGrid, cs: ConstraintSet, cfg: SolverConfig):
        self.mm = mm
        self.grid = grid
        self.n = grid.size
        self.h = grid.log_step
        self.k_fine = cfg.denominators[-1]
        self.workers = cfg.threads
        self.n_sd = cfg.n_sd
        lo, hi = cs.bounds(mm.m)
        reach = np.maximum(np.abs(lo), np.abs(hi))
        comp_sd = np.sqrt(np.clip(np.diagonal(mm.covs, axis1=1, axis2=2), 0.0, None))
        sd_max = float(np.max(comp_sd @ reach))
        mu_max = float(np.max(np.abs(mm.means) @ reach))
        y_lo = 1.0 - mu_max - cfg.n_sd * sd_max
        y_hi = 1.0 + mu_max + cfg.n_sd * sd_max
        d_lo = self.n if y_lo <= 0 else int(np.ceil(-np.log(y_lo) / self.h))
        d_hi = int(np.ceil(np.log(y_hi) / self.h))
        self.D = min(max(d_lo, d_hi) + 1, self.n + 1)
        # node values padded with D + 2 virtual nodes above the grid
        self.n_ext = self.n + self.D + 2
        self.L = sp_fft.next_fast_len(self.n_ext + 2 * self.D + 2, real=True)
        self.breaks = np.exp(np.arange(-self.D, self.D + 2) * self.h)
        nf = self.L // 2 + 1
        nk = 2 * self.D + 1
        cap = max(4 * cfg.chunk_size, int(cfg.kernel_cache_mb * 2 ** 20 / (nf * 16 + nk * 8)))
        self.capacity = cap
        self._slots: dict = {}
        self._used: dict = {}
        self._free: list = []
        self.generation = 0
        self._FC = np.empty((0, nf), dtype=complex)
        self._B = np.empty((0, nk))
        self.hits = 0
        self.misses = 0

    def build(self, coords: np.ndarray):
        means, sds = project_many(self.mm, coords / self.k_fine)
        a, b, _ = _kernel_weights(self.breaks, self.mm.weights, means, sds, self.h, self.n_sd)
        c = np.zeros((len(coords), 2 * self.D + 2))
        c[:, :-1] += a
        c[:, 1:] += b
        return sp_fft.rfft(c[:, ::-1], self.L, axis=1, workers=self.workers), b

    def new_stage(self) -> None:
        """Free slots not touched during the previous stage."""
        self.generation += 1
        stale = [k for k, g in self._used.items() if g < self.generation - 1]
        for k in stale:
            self._free.append(self._slots.pop(k))
            del self._used[k]

    def get(self, coords: np.ndarray):
        """Kernel spectra and real-space ``b`` kernels (offset ``d`` at column ``d + D``).

        Misses are stored while free slots remain; once the store is full new
        kernels are computed without being kept (evicting under a cyclic
        access pattern would only thrash).
        """
        keys = [c.tobytes() for c in coords]
        slots = np.full(len(keys), -1, dtype=np.int64)
        for i, k in enumerate(keys):
            slot = self._slots.get(k)
            if slot is not None:
                slots[i] = slot
                self._used[k] = self.generation
        missing = np.flatnonzero(slots < 0)
        self.hits += len(keys) - len(missing)
        self.misses += len(missing)
        if len(missing) == 0:
            return self._FC[slots], self._B[slots]
        FC_new, B_new = self.build(coords[missing])
        self._reserve(len(missing))
        for j, i in enumerate(missing):
            if not self._free:
                break
            slot = self._free.pop()
            self._slots[keys[i]] = slot
            self._used[keys[i]] = self.generation
            self._FC[slot], self._B[slot] = FC_new[j], B_new[j]
        FC = np.empty((len(keys), self._FC.shape[1]), dtype=complex)
        B = np.empty((len(keys), self._B.shape[1]))
        hit = slots >= 0
        FC[hit], B[hit] = self._FC[slots[hit]], self._B[slots[hit]]
        FC[missing], B[missing] = FC_new, B_new
        return FC, B

    def _reserve(self, extra: int) -> None:
        """Grow the store geometrically up to capacity so ``extra`` slots are free if possible."""
        size = len(self._FC)
        if len(self._free) >= extra or size >= self.capacity:
            return
        new = min(self.capacity, max(size + extra - len(self._free), 2 * size))
        for name in ("_FC", "_B"):
            old = getattr(self, name)
            grown = np.empty((new, old.shape[1]), dtype=old.dtype)
            grown[:size] = old
            setattr(self, name, grown)
        self._free.extend(range(new - 1, size - 1, -1))


class _StageEvaluator:
    """Grid-wide stage values for batches of allocations.

    Segment ``s`` of the extended grid is "full" when it lies inside the
    target. Full segments use the folded kernel on the vector of left node
    values; at a switch between full and non-full segments the shared node is
    corrected explicitly, and partially covered segments are integrated
    directly.
    """

    def __init__(self, bank: _KernelBank, J_next: ValueFunction, X_next: Interval):
        self.bank = bank
        n, n_ext = bank.n, bank.n_ext
        nodes_ext = bank.grid.x_lo * np.exp(bank.h * np.arange(n_ext + 1))
        self._seg_lo = bank.grid.x_lo * np.exp(bank.h * np.arange(-1, n_ext))
        nodes = nodes_ext[:n]
        Jt = _extended_values(J_next.values, nodes, X_next)
        top = Jt[-1] if np.isinf(X_next.upper) else 0.0
        V = np.concatenate([Jt, np.full(n_ext - n, top)])
        z0, z1 = nodes_ext[:-1], nodes_ext[1:]
        c0 = np.maximum(z0, X_next.lower)
        c1 = np.minimum(z1, X_next.upper)
        full = (c0 <= z0 * (1 + _BOUND_RTOL)) & (c1 >= z1 * (1 - _BOUND_RTOL))
        partial = (c1 > c0) & ~full & ((c1 - c0) > 1e-15 * (z1 - z0))
        self.FV = sp_fft.rfft(np.where(full, V, 0.0), bank.L)
        self.V = V
        # node s + 1 is seen as the right end of segment s and the left end of s + 1
        # segment -1, below the grid, is never full; corrections smaller than
        # 1e-16 are below the resolution of values in [0, 1] and are skipped
        full_ = np.concatenate([[False], full])
        switch = np.flatnonzero(full_[:-1] != full_[1:]) - 1
        self.fixes = [(int(s), (float(full_[s + 1]) - float(full_[s + 2])) * V[s + 1])
                      for s in switch if abs(V[s + 1]) > 1e-16]
        self.partial = [(int(s), c0[s], c1[s]) for s in np.flatnonzero(partial)]

    def _segment(self, s, lo, hi, means, sds):
        """Weights of segment ``s`` (``-1`` is the one just below the grid) clipped to ``[lo, hi]``."""
        bank = self.bank
        i = np.arange(max(0, s - bank.D - 1), min(bank.n, s + bank.D + 2))
        x = self._seg_lo[i + 1]
        z0, z1 = self._seg_lo[s + 1], self._seg_lo[s + 2]
        a, b = _linear_weights(z0 / x, z1 / x, lo / x, hi / x,
                               bank.mm.weights, means[:, None, :], sds[:, None, :])
        return i, a, b

    def __call__(self, coords: np.ndarray) -> np.ndarray:
        bank = self.bank
        n, D = bank.n, bank.D
        FC, B = bank.get(coords)
        vals = sp_fft.irfft(FC * self.FV, bank.L, axis=1, workers=bank.workers)[:, D + 1:D + 1 + n]
        for s, coef in self.fixes:
            # nodes i with offset s - i inside [-D, D]
            i0, i1 = max(0, s - D), min(n, s + D + 1)
            if i0 < i1:
                vals[:, i0:i1] += coef * B[:, s + D - np.arange(i0, i1)]
        if self.partial:
            means, sds = project_many(bank.mm, coords / bank.k_fine)
            for s, lo, hi in self.partial:
                i, a, b = self._segment(s, lo, hi, means, sds)
                vals[:, i] += a * self.V[s] + b * self.V[s + 1]
        return vals


def build_grid(ts: TargetSequence, x0: float, cfg: SolverConfig) -> StateGrid:
    """Log-uniform grid from the config, anchored on the terminal lower bound if it is inside."""
    anchor = None
    if cfg.anchor_grid:
        lower = ts[ts.horizon].lower
        anchor = lower if cfg.x_lo < lower < cfg.x_hi else x0
    grid = StateGrid.log_uniform(cfg.x_lo, cfg.x_hi, cfg.grid_size, anchor=anchor)
    lo, hi = grid.nodes[0], grid.x_hi
    if not lo <= x0 <= hi:
        raise InputError(f"initial value {x0} outside the state grid [{lo:.4g}, {hi:.4g}]")
    for k, s in enumerate(ts.sets[1:], start=1):
        for b in (s.lower, s.upper):
            if np.isfinite(b) and b > lo and not b < hi:
                raise InputError(f"target bound {b} of stage {k} lies at or above the grid top {hi:.4g}; raise x_hi")
            if np.isfinite(b) and b > 0 and b < lo and s.upper < lo:
                raise InputError(f"target set {s} of stage {k} lies below the grid; lower x_lo")
    return grid


def solve(ts: TargetSequence, cs: ConstraintSet, mm: MixtureModel, x0: float = 1.0,
          cfg: Optional[SolverConfig] = None, progress: Optional[Callable[[int], None]] = None) -> Solution:
    """Backward recursion ``k = N-1 .. 0``.

    ``p_star`` is the stage-0 optimum evaluated directly at ``x0`` against
    ``J_1``; the grid values ``J_0`` are kept for the policy map. The matching
    allocation is ``info["x0_allocation"]``.
    """
    cfg = cfg or SolverConfig()
    if not ts[0].contains(x0):
        raise InputError(f"x0={x0} is not in X_0={ts[0]}")
    t_start = time.perf_counter()
    N, m = ts.horizon, mm.m
    grid = build_grid(ts, x0, cfg)
    bank = _KernelBank(mm, grid, cs, cfg)
    risk_cov = mm.covariance()
    k_fine = cfg.denominators[-1]
    coarse, _ = enumerate_lattice(m, cfg.coarse_step, cs, risk_cov)

    values: list = [None] * (N + 1)
    terminal = terminal_values(grid, ts[N])
    values[N] = ValueFunction(N, grid, terminal.values)
    alloc = np.empty((N, grid.size, m))
    for k in range(N - 1, -1, -1):
        ev = _StageEvaluator(bank, values[k + 1], ts[k + 1])
        inc = _search(ev, grid.size, m, cs, risk_cov, cfg, coarse=coarse)
        v = inc.value
        if not np.all(np.isfinite(v)):
            bad = int(np.flatnonzero(~np.isfinite(v))[0])
            raise NumericalError(f"non-finite value at stage {k}, node {bad} (x={grid.nodes[bad]:.6g})")
        if v.min() < -1e-8 or v.max() > 1 + 1e-8:
            i = int(np.argmax(np.abs(v - np.clip(v, 0, 1))))
            raise NumericalError(f"value {v[i]:.3e} outside [0, 1] at stage {k}, node {i}")
        values[k] = ValueFunction(k, grid, np.clip(v, 0.0, 1.0))
        alloc[k] = inc.coords / k_fine
        if progress is not None:
            progress(k)
        logger.debug("stage %d done, J at x0 = %.6f", k, float(values[k](x0)))
    policy = PolicyMap(grid=grid, allocations=alloc, labels=list(mm.labels))
    u0, p_star = optimize_stage_node(x0, values[1], ts[1], cs, mm, cfg)
    info = {"x0_allocation": u0, "wall_time_s": time.perf_counter() - t_start, "grid_lo": grid.nodes[0], "grid_hi": grid.x_hi,
            "grid_size": grid.size, "kernel_halfwidth": bank.D, "fft_length": bank.L,
            "kernel_cache_hits": bank.hits, "kernel_cache_misses": bank.misses}
    return Solution(policy, values, p_star, info)


# ---------------------------------------------------------------------------
# Risk budget and policy lookup
# ---------------------------------------------------------------------------

def var_to_sigma_max(var_level: float, horizon_months: float = 1.0, confidence_multiplier: float = 2.3263) -> float:
    """Annualised volatility cap from a parametric VaR: ``VaR sqrt(12 / months) / z``."""
    if var_level < 0 or horizon_months <= 0 or confidence_multiplier <= 0:
        raise InputError("VaR level must be >= 0, horizon and multiplier > 0")
    return var_level * np.sqrt(12.0 / horizon_months) / confidence_multiplier


def per_period_sigma(sigma_annual: float, periods_per_year: int) -> float:
    return sigma_annual / np.sqrt(periods_per_year)


def query_policy(pm: PolicyMap, k: int, x: float) -> np.ndarray:
    """Allocation at the grid node nearest to ``x`` (clamped to the grid ends)."""
    u, clamped = pm.lookup(k, np.asarray([x], dtype=float))
    if clamped[0]:
        logger.info("query_policy: x=%g outside grid [%g, %g], clamped", x, pm.grid.nodes[0], pm.grid.x_hi)
    return u[0]
