"""
Feasible allocation sets and the weight lattices searched over them.

Allocations on a lattice of step ``1/K`` are carried as integer coordinates
(``u = c / K``) so that budget sums are exact and lattice points can be hashed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product
from typing import Optional, Sequence

import numpy as np

from .errors import InfeasibleError, InputError

__all__ = ["ConstraintSet", "enumerate_lattice", "neighbourhood", "lattice_denominator"]

RISK_TOL = 1e-6
FEAS_TOL = 1e-8


@dataclass(frozen=True)
class ConstraintSet:
    """Budget, long-only, per-asset bounds and a per-period volatility cap.

    ``sigma_max`` is compared with ``sqrt(u^T cov u)`` where ``cov`` is the
    per-period covariance supplied by the caller (tolerance ``1e-6``).
    """

    budget: bool = True
    long_only: bool = True
    sigma_max: Optional[float] = None
    lower: Optional[Sequence[float]] = None
    upper: Optional[Sequence[float]] = None

    def __post_init__(self):
        if self.sigma_max is not None and not self.sigma_max >= 0:
            raise InputError("sigma_max must be >= 0")

    def bounds(self, m: int) -> tuple[np.ndarray, np.ndarray]:
        lo = np.full(m, 0.0 if self.long_only else -np.inf)
        hi = np.full(m, np.inf)
        if self.budget and self.long_only:
            hi[:] = 1.0
        if self.lower is not None:
            lo = np.maximum(lo, np.asarray(self.lower, dtype=float))
        if self.upper is not None:
            hi = np.minimum(hi, np.asarray(self.upper, dtype=float))
        return lo, hi

    def violations(self, u, cov: Optional[np.ndarray] = None, tol: float = FEAS_TOL) -> list[str]:
        u = np.asarray(u, dtype=float)
        lo, hi = self.bounds(u.shape[0])
        out = []
        if self.budget and abs(u.sum() - 1.0) > tol:
            out.append(f"budget (sum={u.sum():.10g})")
        if np.any(u < lo - tol):
            out.append("lower bound" if self.lower is not None else "long-only")
        if np.any(u > hi + tol):
            out.append("upper bound")
        if self.sigma_max is not None:
            if cov is None:
                raise InputError("a covariance matrix is needed to check the risk budget")
            sd = float(np.sqrt(max(u @ cov @ u, 0.0)))
            if sd > self.sigma_max + RISK_TOL:
                out.append(f"risk budget (sd={sd:.6g} > {self.sigma_max:.6g})")
        return out

    def is_feasible(self, u, cov: Optional[np.ndarray] = None, tol: float = FEAS_TOL) -> bool:
        return not self.violations(u, cov, tol)

    def risk_ok(self, U: np.ndarray, cov: Optional[np.ndarray]) -> np.ndarray:
        """Vectorised risk-budget check for a batch of allocations."""
        if self.sigma_max is None:
            return np.ones(len(U), dtype=bool)
        var = np.einsum("ni,ij,nj->n", U, cov, U)
        return np.sqrt(np.clip(var, 0.0, None)) <= self.sigma_max + RISK_TOL


def lattice_denominator(step: float) -> int:
    k = int(round(1.0 / step))
    if k < 1 or abs(k * step - 1.0) > 1e-9:
        raise InputError(f"lattice step {step} must divide 1 exactly")
    return k


def _compositions(total: int, parts: int, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """All integer vectors in [lo, hi] with the given number of parts summing to ``total``."""
    if parts == 1:
        return np.array([[total]]) if lo[0] <= total <= hi[0] else np.empty((0, 1), dtype=np.int64)
    out = []
    for first in range(int(lo[0]), int(min(hi[0], total - lo[1:].sum())) + 1):
        rest = _compositions(total - first, parts - 1, lo[1:], hi[1:])
        if len(rest):
            out.append(np.column_stack([np.full(len(rest), first), rest]))
    if not out:
        return np.empty((0, parts), dtype=np.int64)
    return np.vstack(out)


def _integer_bounds(cs: ConstraintSet, m: int, K: int) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = cs.bounds(m)
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise InputError("allocation lattice needs finite weight bounds (long_only+budget, or explicit lower/upper)")
    return np.ceil(lo * K - 1e-9).astype(np.int64), np.floor(hi * K + 1e-9).astype(np.int64)


def enumerate_lattice(m: int, step: float, cs: ConstraintSet, cov: Optional[np.ndarray] = None):
    """Every feasible allocation on the lattice of the given step.

    Returns ``(coords, K)`` with integer ``coords`` of shape ``(n, m)``; the
    allocations are ``coords / K``. Raises :class:`InfeasibleError` naming the
    binding constraints when nothing is feasible.
    """
    K = lattice_denominator(step)
    ilo, ihi = _integer_bounds(cs, m, K)
    if cs.budget:
        coords = _compositions(K, m, ilo, ihi)
    else:
        coords = np.array(list(product(*[range(a, b + 1) for a, b in zip(ilo, ihi)])), dtype=np.int64)
        coords = coords.reshape(-1, m)
    if len(coords) == 0:
        raise InfeasibleError("no allocation satisfies the budget/bound constraints on the lattice")
    U = coords / K
    ok = cs.risk_ok(U, cov)
    if not ok.any():
        var = np.einsum("ni,ij,nj->n", U, cov, U)
        raise InfeasibleError(
            f"risk budget sigma_max={cs.sigma_max:.6g} is below the least risky lattice allocation "
            f"(sd={np.sqrt(var.min()):.6g})")
    return coords[ok].astype(np.int64), K


def neighbourhood(center: np.ndarray, radius: int, budget: bool) -> np.ndarray:
    """Integer offsets of a box of half-width ``radius``.

    With a budget constraint the last coordinate absorbs the others so every
    offset sums to zero.
    """
    m = center.shape[-1]
    free = m - 1 if budget else m
    rng = range(-radius, radius + 1)
    if free == 0:
        return np.zeros((1, m), dtype=np.int64)
    offs = np.array(list(product(rng, repeat=free)), dtype=np.int64).reshape(-1, free)
    if budget:
        offs = np.column_stack([offs, -offs.sum(axis=1)])
    return offs
