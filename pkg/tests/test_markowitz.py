import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from odaa import casestudy
from odaa.allocation import ConstraintSet, enumerate_lattice, neighbourhood
from odaa.errors import InfeasibleError, InputError
from odaa.markowitz import (FrontierPoint, efficient_frontier, feasible_return_range, global_min_variance,
                            min_variance_for_target, select_max_success)
from odaa.reachability import TargetSequence

LONG = ConstraintSet(budget=True, long_only=True)


def _random_instance(seed, m=3):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(m, m))
    sigma = (a @ a.T + 0.1 * np.eye(m)) * 1e-2
    mu = rng.uniform(0.01, 0.12, m)
    return mu, sigma


def _lattice_oracle(mu, sigma, r_bar, step=0.001):
    """Smallest variance among lattice points returning at least r_bar.

    Above the minimum-variance return the frontier increases, so this bounds
    the exact optimum from above and converges to it as the step shrinks.
    """
    coords, K = enumerate_lattice(len(mu), step, LONG)
    U = coords / K
    ok = U @ mu >= r_bar
    return np.einsum("ni,ij,nj->n", U[ok], sigma, U[ok]).min()


class TestLattice:
    def test_count_coarse(self):
        coords, K = enumerate_lattice(3, 0.025, LONG)
        assert K == 40 and len(coords) == 41 * 42 // 2
        assert np.all(coords.sum(axis=1) == 40)

    def test_risk_filter(self):
        cov = np.diag([0.0, 1e-4, 4e-4])
        coords, K = enumerate_lattice(3, 0.1, ConstraintSet(sigma_max=0.01), cov)
        U = coords / K
        assert np.all(np.sqrt(np.einsum("ni,ij,nj->n", U, cov, U)) <= 0.01 + 1e-6)

    def test_infeasible_risk(self):
        with pytest.raises(InfeasibleError, match="risk budget"):
            enumerate_lattice(2, 0.1, ConstraintSet(sigma_max=1e-4), np.eye(2))

    def test_bad_step(self):
        with pytest.raises(InputError):
            enumerate_lattice(3, 0.03, LONG)

    def test_neighbourhood_budget_neutral(self):
        offs = neighbourhood(np.zeros(3, dtype=int), 2, True)
        assert len(offs) == 25 and np.all(offs.sum(axis=1) == 0)


class TestMinVariance:
    def test_synthetic_equal_weight(self):
        mu = np.full(3, 0.03)
        sigma = np.eye(3) * 0.03 ** 2
        p = min_variance_for_target(mu, sigma, 0.03, LONG)
        np.testing.assert_allclose(p.allocation, [1 / 3] * 3, atol=1e-12)

    def test_riskless(self):
        p = min_variance_for_target([0.01, 0.05], np.diag([0.0, 0.04]), 0.01, LONG)
        np.testing.assert_allclose(p.allocation, [1.0, 0.0], atol=1e-12)
        assert p.variance == pytest.approx(0.0, abs=1e-15)

    @pytest.mark.parametrize("seed", range(6))
    def test_random_vs_lattice(self, seed):
        mu, sigma = _random_instance(seed)
        r_min, r_max = feasible_return_range(mu, sigma, LONG)
        r_bar = r_min + 0.6 * (r_max - r_min)
        p = min_variance_for_target(mu, sigma, r_bar, LONG)
        assert abs(p.allocation @ mu - r_bar) < 1e-10
        assert LONG.is_feasible(p.allocation)
        oracle = _lattice_oracle(mu, sigma, r_bar)
        assert p.variance <= oracle + 1e-12
        assert abs(p.variance - oracle) < 1e-3

    def test_infeasible_target_reports_range(self):
        # equal variances: the minimum-variance portfolio is equal weight, r_min = 0.19/3
        with pytest.raises(InfeasibleError, match=r"\[0.0633333, 0.11\]"):
            min_variance_for_target([0.03, 0.05, 0.11], np.eye(3) * 1e-4, 0.2, LONG)

    def test_not_psd(self):
        with pytest.raises(InputError):
            min_variance_for_target([0.1, 0.2], [[1, 2], [2, 1]], 0.15, LONG)


class TestRange:
    def test_corner(self):
        _, r_max = feasible_return_range([0.03, 0.05, 0.11], np.eye(3) * 1e-3, LONG)
        assert r_max == pytest.approx(0.11, abs=1e-12)

    def test_single_asset(self):
        r_min, r_max = feasible_return_range([0.07], [[0.01]], LONG)
        assert r_min == pytest.approx(0.07) and r_max == pytest.approx(0.07)

    def test_case_study_r_max(self):
        t = casestudy.moment_table()
        _, r_max = feasible_return_range(t.er, t.cov, LONG)
        assert r_max == pytest.approx(0.1062, abs=1e-12)

    def test_risk_cap_limits_range(self):
        t = casestudy.moment_table()
        cs = ConstraintSet(sigma_max=casestudy.sigma_max_annual())
        _, r_max = feasible_return_range(t.er, t.cov, cs)
        p = min_variance_for_target(t.er, t.cov, r_max, cs)
        assert p.sd == pytest.approx(cs.sigma_max, abs=1e-6)

    def test_infeasible_bounds(self):
        with pytest.raises(InfeasibleError):
            global_min_variance([0.1, 0.2], np.eye(2), ConstraintSet(upper=[0.3, 0.3]))


class TestFrontier:
    def test_two_asset_midpoint(self):
        # equal weights return the midpoint of the two means and are also the
        # minimum-variance portfolio, so the frontier starts there
        p = min_variance_for_target([0.02, 0.04], np.eye(2) * 0.01, 0.03, LONG)
        np.testing.assert_allclose(p.allocation, [0.5, 0.5], atol=1e-12)
        f = efficient_frontier([0.02, 0.04], np.eye(2) * 0.01, LONG, n_points=3)
        np.testing.assert_allclose(f[0].allocation, [0.5, 0.5], atol=1e-12)
        assert f[0].target_return == pytest.approx(0.03, abs=1e-12)

    def test_synthetic_degenerate(self):
        f = efficient_frontier(np.full(3, 0.03), np.eye(3) * 9e-4, LONG, n_points=5)
        for p in f:
            np.testing.assert_allclose(p.allocation, [1 / 3] * 3, atol=1e-12)
            assert p.target_return == pytest.approx(0.03, abs=1e-12)

    @pytest.mark.parametrize("seed", range(4))
    def test_monotone_and_feasible(self, seed):
        mu, sigma = _random_instance(seed)
        f = efficient_frontier(mu, sigma, LONG, n_points=15)
        var = np.array([p.variance for p in f])
        assert np.all(np.diff(var) >= -1e-14)
        for p in f:
            assert LONG.is_feasible(p.allocation)

    @pytest.mark.parametrize("seed", range(3))
    def test_beats_lattice(self, seed):
        mu, sigma = _random_instance(seed + 10)
        coords, K = enumerate_lattice(3, 0.01, LONG)
        U = coords / K
        r, var = U @ mu, np.einsum("ni,ij,nj->n", U, sigma, U)
        for p in efficient_frontier(mu, sigma, LONG, n_points=9):
            same = np.abs(r - p.target_return) < 1e-12
            if same.any():
                assert p.variance <= var[same].min() + 1e-14

    def test_case_study_caps(self):
        t = casestudy.moment_table()
        cs = ConstraintSet(sigma_max=casestudy.sigma_max_annual())
        for p in efficient_frontier(t.er, t.cov, cs, n_points=21):
            assert cs.is_feasible(p.allocation, t.cov)

    @settings(max_examples=25, deadline=None)
    @given(st.floats(0.2, 5.0))
    def test_scaling_invariance(self, c):
        mu, sigma = _random_instance(3)
        r_min, r_max = feasible_return_range(mu, sigma, LONG)
        r = 0.5 * (r_min + r_max)
        a = min_variance_for_target(mu, sigma, r, LONG).allocation
        b = min_variance_for_target(c * mu, sigma, c * r, LONG).allocation
        np.testing.assert_allclose(a, b, atol=1e-9)


class TestSelection:
    def test_single_point(self):
        mm = casestudy.mixture_fixture()
        pt = FrontierPoint(0.05, np.array([0.2, 0.3, 0.5]), 0.01)
        sel = select_max_success([pt], mm, casestudy.targets(horizon=4, terminal=1.0), n_paths=2000)
        assert sel.index == 0
        np.testing.assert_array_equal(sel.allocation, pt.allocation)

    def test_vacuous_target(self):
        mm = casestudy.mixture_fixture()
        f = [FrontierPoint(0.0, np.array(u, float), 0.0) for u in ([1, 0, 0], [0, 0.3, 0.7], [0, 0, 1])]
        ts = TargetSequence.terminal(10, 0.0)
        sel = select_max_success(f, mm, ts, n_paths=5000)
        np.testing.assert_array_equal(sel.probabilities, 1.0)
        assert sel.index == 0

    def test_empty(self):
        with pytest.raises(InputError):
            select_max_success([], casestudy.mixture_fixture(), casestudy.targets(), n_paths=10)
