"""
Seeded Monte Carlo for portfolio paths under dynamic or static allocations.

Paths are generated in fixed-size blocks. Block ``b`` draws from its own
stream ``SeedSequence(seed, spawn_key=(b,))``, so a result depends only on
``(seed, n_paths, block_size)`` and not on how blocks are spread over
threads. Every path consumes the same draws whatever the policy, which couples
runs that share a seed (common random numbers).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .econometrics import ReturnSeries
from .errors import InputError
from .mixture import MixtureModel, psd_factor
from .reachability import PolicyMap, TargetSequence

__all__ = [
    "Histogram",
    "SimulationResult",
    "simulate",
    "simulate_static_many",
    "synthetic_three_asset",
    "histogram",
    "DEFAULT_BLOCK",
]

DEFAULT_BLOCK = 8192
MODES = ("constant_mix", "buy_and_hold")


@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class SimulationResult:
    n_paths: int
    success_count: int
    probability: float
    std_error: float
    terminal_values: np.ndarray = field(repr=False)
    seed: Optional[int] = None

    @property
    def ci95(self) -> tuple[float, float]:
        half = 1.959963984540054 * self.std_error
        return max(0.0, self.probability - half), min(1.0, self.probability + half)

    def histogram(self, n_bins: int = 50, value_range=None) -> Histogram:
        return histogram(self.terminal_values, n_bins, value_range)


def _block_rng(seed: int, block: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(block,)))


class _Sampler:
    def __init__(self, mm: MixtureModel):
        self.cum = np.cumsum(mm.weights)
        self.cum[-1] = 1.0
        self.means = mm.means
        self.factors = [psd_factor(c.cov) for c in mm.components]
        self.m = mm.m

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        comp = np.searchsorted(self.cum, rng.random(n), side="right")
        z = rng.standard_normal((n, self.m))
        w = np.empty((n, self.m))
        for c, L in enumerate(self.factors):
            sel = comp == c
            w[sel] = self.means[c] + z[sel] @ L.T
        return w


def _check_inputs(policy, mm: MixtureModel, ts: TargetSequence, x0: float, n_paths: int, mode: str):
    if n_paths < 1:
        raise InputError("n_paths must be >= 1")
    if mode not in MODES:
        raise InputError(f"mode must be one of {MODES}")
    if not x0 > 0:
        raise InputError("x0 must be positive")
    if isinstance(policy, PolicyMap):
        if policy.horizon != ts.horizon:
            raise InputError(f"policy horizon {policy.horizon} differs from target horizon {ts.horizon}")
        if policy.m != mm.m:
            raise InputError(f"policy has {policy.m} assets, model has {mm.m}")
        if mode != "constant_mix":
            raise InputError("buy_and_hold only applies to static allocations")
    else:
        u = np.asarray(policy, dtype=float)
        if u.shape != (mm.m,) or not np.all(np.isfinite(u)):
            raise InputError(f"static allocation must be a finite {mm.m}-vector")


def _run_block(block: int, size: int, policy, sampler: _Sampler, ts: TargetSequence, x0: float,
               seed: int, mode: str):
    rng = _block_rng(seed, block)
    x = np.full(size, float(x0))
    ok = ts[0].contains(x)
    dynamic = isinstance(policy, PolicyMap)
    if not dynamic:
        u = np.asarray(policy, dtype=float)
        hold = x[:, None] * u[None, :] if mode == "buy_and_hold" else None
    for k in range(ts.horizon):
        w = sampler.draw(rng, size)
        if dynamic:
            U, _ = policy.lookup(k, x)
            x = x * (1.0 + np.einsum("ij,ij->i", U, w))
        elif hold is not None:
            hold = hold * (1.0 + w)
            x = hold.sum(axis=1)
        else:
            x = x * (1.0 + w @ u)
        ok &= ts[k + 1].contains(x)
    return int(ok.sum()), x


def _blocks(n_paths: int, block_size: int):
    n_blocks = -(-n_paths // block_size)
    return [(b, min(block_size, n_paths - b * block_size)) for b in range(n_blocks)]


def simulate(policy: Union[PolicyMap, np.ndarray], mm: MixtureModel, ts: TargetSequence, x0: float = 1.0,
             n_paths: int = 100_000, seed: int = 0, threads: int = 1, mode: str = "constant_mix",
             block_size: int = DEFAULT_BLOCK) -> SimulationResult:
    """Fraction of paths that stay inside every target set.

    ``policy`` is a :class:`PolicyMap` (nearest-node lookup each period) or a
    static allocation. Static allocations are rebalanced every period
    (``constant_mix``) or held from ``x0`` onwards (``buy_and_hold``).
    """
    _check_inputs(policy, mm, ts, x0, n_paths, mode)
    if block_size < 1 or threads < 1:
        raise InputError("block_size and threads must be >= 1")
    sampler = _Sampler(mm)
    jobs = _blocks(n_paths, block_size)

    def run(job):
        return _run_block(job[0], job[1], policy, sampler, ts, x0, seed, mode)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    success = sum(r[0] for r in results)
    terminal = np.concatenate([r[1] for r in results])
    p = success / n_paths
    return SimulationResult(n_paths=n_paths, success_count=success, probability=p,
                            std_error=float(np.sqrt(p * (1.0 - p) / n_paths)), terminal_values=terminal,
                            seed=seed)


def simulate_static_many(allocations: np.ndarray, mm: MixtureModel, ts: TargetSequence, x0: float = 1.0,
                         n_paths: int = 100_000, seed: int = 0, mode: str = "constant_mix",
                         block_size: int = DEFAULT_BLOCK) -> np.ndarray:
    """Success counts for several static allocations on the same paths.

    Agrees exactly with :func:`simulate` for each allocation given the same
    seed and block size.
    """
    A = np.atleast_2d(np.asarray(allocations, dtype=float))
    for u in A:
        _check_inputs(u, mm, ts, x0, n_paths, mode)
    sampler = _Sampler(mm)
    counts = np.zeros(len(A), dtype=np.int64)
    for block, size in _blocks(n_paths, block_size):
        rng = _block_rng(seed, block)
        x = np.full((size, len(A)), float(x0))
        ok = np.broadcast_to(ts[0].contains(x0), x.shape).copy()
        hold = x[:, :, None] * A[None, :, :] if mode == "buy_and_hold" else None
        for k in range(ts.horizon):
            w = sampler.draw(rng, size)
            if hold is not None:
                hold = hold * (1.0 + w[:, None, :])
                x = hold.sum(axis=2)
            else:
                x = x * (1.0 + w @ A.T)
            ok &= ts[k + 1].contains(x)
        counts += ok.sum(axis=0)
    return counts


def histogram(values, n_bins: int, value_range=None) -> Histogram:
    """Equal-width histogram; values outside the range are counted in the edge bins."""
    if n_bins < 1:
        raise InputError("n_bins must be >= 1")
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise InputError("histogram of an empty sample")
    lo, hi = value_range if value_range is not None else (v.min(), v.max())
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, n_bins + 1)
    idx = np.clip(np.searchsorted(edges, v, side="right") - 1, 0, n_bins - 1)
    return Histogram(edges=edges, counts=np.bincount(idx, minlength=n_bins))


def synthetic_three_asset(n: int, rho: float = 0.03, seed: int = 0) -> ReturnSeries:
    """Three independent return columns with equal mean and sd ``rho``.

    Column 1 is ``Gamma(1, rho)``, column 2 is ``2 rho - g`` with ``g`` an
    independent ``Gamma(1, rho)`` draw, column 3 is ``Normal(rho, rho)``.
    Shape-1 Gamma draws use the inverse CDF ``-rho log(1 - U)``.
    """
    if not rho > 0 or n < 1:
        raise InputError("need rho > 0 and n >= 1")
    rng = np.random.default_rng(seed)
    g1 = -rho * np.log1p(-rng.random(n))
    g2 = -rho * np.log1p(-rng.random(n))
    eta = rng.normal(rho, rho, n)
    return ReturnSeries(returns=np.column_stack([g1, 2.0 * rho - g2, eta]), labels=["gamma", "neg_gamma", "normal"])
