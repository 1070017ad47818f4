import numpy as np
import pytest
from scipy import stats

from odaa import casestudy
from odaa import reachability as R
from odaa.allocation import ConstraintSet, enumerate_lattice
from odaa.errors import InfeasibleError, InputError
from odaa.mixture import GaussianComponent, MixtureModel, project_many
from odaa.reachability import (Interval, SolverConfig, StateGrid, TargetSequence, ValueFunction, build_grid,
                               optimize_stage_node, per_period_sigma, query_policy, solve, stage_value,
                               terminal_values, var_to_sigma_max)

QUICK = dict(grid_size=300, refine_steps=())


def _random_mixture(rng, m):
    comps = []
    for _ in range(2):
        sd = rng.uniform(0.005, 0.04, m)
        a = rng.normal(size=(m, m))
        c = a @ a.T + m * np.eye(m)
        d = np.sqrt(np.diag(c))
        corr = c / np.outer(d, d)
        comps.append(GaussianComponent.from_sd_corr(rng.normal(0.002, 0.01, m), sd, corr))
    w = rng.uniform(0.6, 0.95)
    return MixtureModel(np.array([w, 1 - w]), tuple(comps))


def _tail(x, t, weights, means, sds):
    """P(x (1 + r) >= t) for a univariate Gaussian mixture r."""
    return float(np.sum(weights * stats.norm.sf((t / x - 1.0 - means) / sds)))


class TestTargets:
    def test_terminal_sequence(self):
        ts = TargetSequence.terminal(104, 1.1449)
        assert ts.horizon == 104
        assert ts[104].lower == 1.1449 and np.isinf(ts[104].upper)
        assert ts[50].lower == 0.0 and ts[0].contains(1.0)

    def test_ranges_must_cover(self):
        with pytest.raises(InputError, match="no target set"):
            TargetSequence.from_ranges(5, [(1, 3, 0.0, None)])

    def test_ranges_no_overlap(self):
        with pytest.raises(InputError, match="more than one"):
            TargetSequence.from_ranges(3, [(1, 2, 0, None), (2, 3, 0, None)])

    def test_empty_interval(self):
        with pytest.raises(InputError):
            Interval(2.0, 1.0)


class TestTerminal:
    grid = StateGrid.log_uniform(0.4, 2.5, 500, anchor=1.1449)

    def test_indicator(self):
        vf = terminal_values(self.grid, Interval(1.1449))
        nodes = self.grid.nodes
        i_hi = np.searchsorted(nodes, 1.20)
        assert vf.values[i_hi] == 1.0
        assert vf.values[np.searchsorted(nodes, 1.0) - 1] == 0.0
        assert vf.values[np.argmin(np.abs(nodes - 1.1449))] == 1.0

    def test_full_space(self):
        assert np.all(terminal_values(self.grid, Interval(0.0)).values == 1.0)


class TestStageValue:
    def _setup(self, t, n=4000):
        grid = StateGrid.log_uniform(0.4, 2.5, n, anchor=t)
        X = Interval(t)
        return grid, X, terminal_values(grid, X)

    def test_deterministic_cash(self):
        mm = MixtureModel(np.array([1.0]), (GaussianComponent([0.001, 0.0], np.diag([0.0, 1e-4])),))
        grid = StateGrid.log_uniform(0.4, 2.5, 200)
        J = ValueFunction(1, grid, np.ones(grid.size))
        assert stage_value(1.0, [1.0, 0.0], J, Interval(0.0), mm) == pytest.approx(1.0, abs=1e-14)

    @pytest.mark.parametrize("x,t", [(1.0, 1.02), (1.05, 1.1449), (0.9, 0.85)])
    def test_gaussian_tail(self, x, t):
        mm = MixtureModel(np.array([1.0]), (GaussianComponent([0.004, 0.001], [[4e-4, 1e-5], [1e-5, 1e-4]]),))
        u = np.array([0.6, 0.4])
        grid, X, J = self._setup(t)
        mean = float(mm.means[0] @ u)
        sd = float(np.sqrt(u @ mm.covs[0] @ u))
        expected = 1.0 - stats.norm.cdf((t / x - 1.0 - mean) / sd)
        assert stage_value(x, u, J, X, mm) == pytest.approx(expected, abs=1e-4)

    def test_mixture_tail_exact_on_anchored_grid(self):
        mm = casestudy.mixture_fixture()
        grid, X, J = self._setup(1.03, n=800)
        u = np.array([0.1, 0.3, 0.6])
        means, sds = project_many(mm, u[None])
        expected = _tail(1.0, 1.03, mm.weights, means[0], sds[0])
        assert stage_value(1.0, u, J, X, mm) == pytest.approx(expected, abs=1e-12)

    def test_bounded(self):
        rng = np.random.default_rng(0)
        mm = casestudy.mixture_fixture()
        grid = StateGrid.log_uniform(0.4, 2.5, 300)
        for _ in range(20):
            J = ValueFunction(1, grid, rng.random(grid.size))
            X = Interval(rng.uniform(0, 1.2), np.inf if rng.random() < 0.5 else rng.uniform(1.25, 2.0))
            u = rng.dirichlet(np.ones(3))
            v = stage_value(rng.uniform(0.5, 2.0), u, J, X, mm)
            assert 0.0 <= v <= 1.0

    def test_rejects_non_positive_x(self):
        grid, X, J = self._setup(1.0, n=50)
        with pytest.raises(InputError):
            stage_value(0.0, [1.0, 0.0, 0.0], J, X, casestudy.mixture_fixture())


class TestFFTEvaluator:
    """The grid-wide FFT correlation must agree with direct segment integration."""

    @pytest.mark.parametrize("X", [Interval(0.0), Interval(1.1449), Interval(1.0, 1.3), Interval(1.00123, 1.2345),
                                   Interval(0.9), Interval(1.05, 1.0501)])
    def test_matches_direct(self, X):
        mm = casestudy.mixture_fixture()
        cs = casestudy.constraints()
        cfg = SolverConfig(grid_size=600)
        grid = build_grid(casestudy.targets(), 1.0, cfg)
        bank = R._KernelBank(mm, grid, cs, cfg)
        vf = ValueFunction(5, grid, np.sort(np.random.default_rng(1).random(grid.size)))
        coords = np.array([[0, 300, 700], [1000, 0, 0], [200, 500, 300], [0, 1000, 0]])
        fast = R._StageEvaluator(bank, vf, X)(coords)
        means, sds = project_many(mm, coords / 1000)
        idx = np.arange(0, grid.size, 7)
        direct = R._direct_values(grid.nodes[idx], means, sds, mm.weights, vf, X)
        np.testing.assert_allclose(fast[:, idx], direct, atol=1e-12)


class TestOptimizeNode:
    def test_single_asset_forced(self):
        mm = MixtureModel(np.array([1.0]), (GaussianComponent([0.01], [[4e-4]]),))
        grid = StateGrid.log_uniform(0.4, 2.5, 400, anchor=1.02)
        J = terminal_values(grid, Interval(1.02))
        u, v = optimize_stage_node(1.0, J, Interval(1.02), ConstraintSet(), mm, SolverConfig())
        np.testing.assert_array_equal(u, [1.0])
        assert v == pytest.approx(stage_value(1.0, u, J, Interval(1.02), mm), abs=1e-15)

    def test_beats_every_lattice_point(self):
        mm = casestudy.mixture_fixture()
        cs = casestudy.constraints()
        grid = StateGrid.log_uniform(0.4, 2.5, 500, anchor=1.03)
        J = terminal_values(grid, Interval(1.03))
        cfg = SolverConfig(refine_steps=(0.005,))
        u, v = optimize_stage_node(1.0, J, Interval(1.03), cs, mm, cfg)
        assert cs.is_feasible(u, mm.covariance())
        coords, K = enumerate_lattice(3, 0.025, cs, mm.covariance())
        vals = stage_value(1.0, coords / K, J, Interval(1.03), mm)
        assert v >= vals.max() - 1e-12

    def test_empty_feasible_set(self):
        mm = casestudy.mixture_fixture()
        grid = StateGrid.log_uniform(0.4, 2.5, 50)
        J = terminal_values(grid, Interval(1.0))
        with pytest.raises(InfeasibleError, match="risk budget"):
            optimize_stage_node(1.0, J, Interval(1.0), ConstraintSet(sigma_max=1e-9, lower=[0, 0.5, 0]), mm)


class TestSolveTrivial:
    def test_certain_success(self):
        r = 0.004
        mm = MixtureModel(np.array([1.0]), (GaussianComponent([r], [[0.0]]),))
        ts = TargetSequence.terminal(1, 1 + r - 1e-9)
        sol = solve(ts, ConstraintSet(), mm, 1.0, SolverConfig(**QUICK))
        assert sol.p_star == pytest.approx(1.0, abs=1e-12)

    def test_certain_failure(self):
        mm = MixtureModel(np.array([1.0]), (GaussianComponent([0.001, 0.002], np.diag([1e-6, 4e-4])),))
        ts = TargetSequence.terminal(1, 2.0)
        sol = solve(ts, ConstraintSet(), mm, 1.0, SolverConfig(**QUICK))
        assert 0.0 <= sol.p_star < 1e-12

    def test_x0_outside_grid(self):
        mm = casestudy.mixture_fixture()
        with pytest.raises(InputError):
            solve(TargetSequence.terminal(1, 1.0, x0=3.0), casestudy.constraints(), mm, 3.0, SolverConfig(**QUICK))

    def test_x0_must_be_in_first_set(self):
        ts = TargetSequence.terminal(1, 1.0, x0=1.0)
        with pytest.raises(InputError):
            solve(ts, ConstraintSet(), casestudy.mixture_fixture(), 1.1, SolverConfig(**QUICK))

    def test_target_above_grid(self):
        with pytest.raises(InputError, match="x_hi"):
            solve(TargetSequence.terminal(1, 3.0), ConstraintSet(), casestudy.mixture_fixture(), 1.0,
                  SolverConfig(**QUICK))


class TestOnePeriodOracle:
    """N=1, m=2: solver values vs exhaustive 0.001-lattice search over closed-form tails."""

    @pytest.mark.parametrize("seed", range(10))
    def test_oracle(self, seed):
        rng = np.random.default_rng(100 + seed)
        mm = _random_mixture(rng, 2)
        t = rng.uniform(0.97, 1.06)
        cov = mm.covariance()
        sd_lo = np.sqrt(min(np.diag(cov)))
        cs = ConstraintSet(sigma_max=None if seed % 2 else float(sd_lo * rng.uniform(1.1, 1.5)))
        sol = solve(TargetSequence.terminal(1, t), cs, mm, 1.0, SolverConfig(grid_size=400))
        coords, K = enumerate_lattice(2, 0.001, cs, cov)
        means, sds = project_many(mm, coords / K)
        nodes = sol.policy.grid.nodes
        for i in np.flatnonzero((nodes > 0.9) & (nodes < 1.1))[::5]:
            x = nodes[i]
            best = max(_tail(x, t, mm.weights, mu, sd) for mu, sd in zip(means, sds))
            assert sol.values[0].values[i] == pytest.approx(best, abs=1e-3)
            assert cs.is_feasible(sol.policy.allocations[0, i], cov)


class TestProperties:
    @pytest.mark.parametrize("seed", range(10))
    def test_normalized_monotone(self, seed):
        rng = np.random.default_rng(seed)
        m = 2 + seed % 2
        mm = _random_mixture(rng, m)
        N = 3
        lowers = rng.uniform(0.0, 1.1, N)
        ts = TargetSequence.from_ranges(N, [(k, k, float(lowers[k - 1]), None) for k in range(1, N + 1)])
        sol = solve(ts, ConstraintSet(), mm, 1.0, SolverConfig(grid_size=150, refine_steps=()))
        for vf in sol.values:
            assert np.all((vf.values >= 0) & (vf.values <= 1))
            # ties within tie_tol go to the lower-variance allocation
            assert np.all(np.diff(vf.values) >= -SolverConfig().tie_tol)

    def test_dominance(self):
        mm = casestudy.mixture_fixture()
        cs = casestudy.constraints()
        cfg = SolverConfig(grid_size=400, refine_steps=())
        p = [solve(TargetSequence.terminal(6, t), cs, mm, 1.0, cfg).p_star for t in (1.04, 1.02, 1.0)]
        assert p[0] <= p[1] + 1e-12 <= p[2] + 2e-12

    def test_policy_feasible(self):
        mm = casestudy.mixture_fixture()
        cs = casestudy.constraints()
        sol = solve(casestudy.targets(horizon=3, terminal=1.01), cs, mm, 1.0, SolverConfig(grid_size=200))
        U = sol.policy.allocations.reshape(-1, 3)
        assert np.all(np.abs(U.sum(axis=1) - 1) <= 1e-8) and np.all(U >= -1e-8)
        assert np.all(cs.risk_ok(U, mm.covariance()))

    def test_thread_invariance(self):
        mm = casestudy.mixture_fixture()
        ts = casestudy.targets(horizon=3, terminal=1.01)
        a = solve(ts, casestudy.constraints(), mm, 1.0, SolverConfig(grid_size=300, threads=1))
        b = solve(ts, casestudy.constraints(), mm, 1.0, SolverConfig(grid_size=300, threads=3))
        np.testing.assert_array_equal(a.policy.allocations, b.policy.allocations)
        for va, vb in zip(a.values, b.values):
            np.testing.assert_array_equal(va.values, vb.values)

    def test_cache_budget_does_not_change_result(self):
        mm = casestudy.mixture_fixture()
        ts = casestudy.targets(horizon=3, terminal=1.01)
        a = solve(ts, casestudy.constraints(), mm, 1.0, SolverConfig(grid_size=300))
        b = solve(ts, casestudy.constraints(), mm, 1.0, SolverConfig(grid_size=300, kernel_cache_mb=0.01))
        np.testing.assert_array_equal(a.policy.allocations, b.policy.allocations)
        assert a.p_star == b.p_star


class TestRiskBudget:
    def test_var_conversion(self):
        assert var_to_sigma_max(0.07, 1, 2.3263) == pytest.approx(0.1042, abs=5e-5)

    def test_zero(self):
        assert var_to_sigma_max(0.0, 3, 2.3263) == 0.0

    def test_weekly(self):
        # the reference weekly figure is the rounded annual cap 0.1042 over sqrt(52)
        assert per_period_sigma(var_to_sigma_max(0.07), 52) == pytest.approx(0.01445, abs=1e-5)
        assert per_period_sigma(0.1042, 52) == pytest.approx(0.01445, abs=5e-6)

    def test_rejects_negative(self):
        with pytest.raises(InputError):
            var_to_sigma_max(-0.1)


class TestQueryPolicy:
    def _policy(self):
        mm = casestudy.mixture_fixture()
        sol = solve(casestudy.targets(horizon=2, terminal=1.0), casestudy.constraints(), mm, 1.0,
                    SolverConfig(**QUICK))
        return sol.policy

    def test_node_identity(self):
        pm = self._policy()
        for i in (0, 17, 150, pm.grid.size - 1):
            np.testing.assert_array_equal(query_policy(pm, 1, pm.grid.nodes[i]), pm.allocations[1, i])

    def test_clamped(self):
        pm = self._policy()
        np.testing.assert_array_equal(query_policy(pm, 0, 100.0), pm.allocations[0, -1])
        np.testing.assert_array_equal(query_policy(pm, 0, 1e-3), pm.allocations[0, 0])

    def test_stage_range(self):
        with pytest.raises(InputError):
            query_policy(self._policy(), 2, 1.0)


def test_config_validation():
    with pytest.raises(InputError):
        SolverConfig(coarse_step=0.025, refine_steps=(0.003,))
    with pytest.raises(InputError):
        SolverConfig(grid_size=1)
