from dataclasses import replace

import numpy as np
import pytest

import mhekit as mk
from mhekit.dynamics import BoxSet, NoiseSpec, SystemModel
from mhekit.solver import InfeasibleCandidateError


@pytest.fixture(scope="module")
def window(reactor, reactor_observer, quad_cost):
    """A representative mid-run case-study window with its warm start."""
    w, v = mk.draw_noise(NoiseSpec(0.01 * np.eye(2), [[0.04]], seed=31), 30)
    truth = mk.simulate(reactor, [5.0, 2.0], w, v, 30)
    olog = mk.run_observer(reactor_observer, [3.0, 0.0], truth.outputs)
    problem = mk.advance_window(reactor, quad_cost, 10, truth.outputs, olog, 20)
    candidate = mk.build_candidate(olog, problem.start, problem.horizon)
    return problem, candidate


def linear_model():
    a = np.array([[0.9, 0.1], [0.05, 0.8]])
    c = np.array([[1.0, 0.5]])
    return SystemModel(
        n=2, p=1,
        f=lambda x: a @ x,
        h=lambda x: c @ x,
        state_set=BoxSet.unbounded(2),
        disturbance_set=BoxSet.unbounded(2),
        noise_set=BoxSet.unbounded(1),
        lipschitz_h=float(np.linalg.norm(c)),
        f_jac=lambda x: a,
        h_jac=lambda x: c,
        name="linear",
    )


class TestCostGradient:
    def test_zero_at_noise_free_global_minimum(self, reactor, quad_cost):
        log = mk.simulate(reactor, [4.0, 1.0], np.zeros((6, 2)), np.zeros((6, 1)), 6)
        problem = mk.HorizonProblem(
            model=reactor, cost=quad_cost, horizon=6,
            prior=log.states[0], measurements=log.outputs,
        )
        d = mk.DecisionVector(log.states[0], np.zeros((6, 2)))
        g_chi, g_om = mk.cost_gradient(problem, d)
        assert np.max(np.abs(g_chi)) < 1e-14
        assert np.max(np.abs(g_om)) < 1e-14

    def test_matches_central_differences(self, window):
        problem, _ = window
        rng = np.random.default_rng(6)
        d = mk.DecisionVector(rng.uniform(1, 5, 2), rng.normal(0, 0.2, (10, 2)))
        g = np.concatenate(
            [arr.ravel() for arr in mk.cost_gradient(problem, d)]
        )
        u0 = np.concatenate([d.chi0, d.omegas.ravel()])
        h = 1e-6
        fd = np.empty_like(u0)
        for j in range(u0.size):
            e = np.zeros_like(u0)
            e[j] = h
            up = mk.DecisionVector((u0 + e)[:2], (u0 + e)[2:].reshape(10, 2))
            dn = mk.DecisionVector((u0 - e)[:2], (u0 - e)[2:].reshape(10, 2))
            fd[j] = (mk.eval_cost(problem, up) - mk.eval_cost(problem, dn)) / (2 * h)
        assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-5

    def test_closed_form_identity_dynamics(self, quad_cost):
        eye = np.eye(2)
        ident = SystemModel(
            n=2, p=2,
            f=lambda x: x.copy(),
            h=lambda x: x.copy(),
            state_set=BoxSet.unbounded(2),
            disturbance_set=BoxSet.unbounded(2),
            noise_set=BoxSet.unbounded(2),
            lipschitz_h=1.0,
            f_jac=lambda x: eye,
            h_jac=lambda x: eye,
        )
        cost = mk.quadratic_cost(np.diag([2.0, 3.0]), np.diag([4.0, 5.0]))
        prior = np.array([0.5, -0.5])
        y0 = np.array([1.0, 2.0])
        problem = mk.HorizonProblem(
            model=ident, cost=cost, horizon=1, prior=prior,
            measurements=y0.reshape(1, 2),
        )
        chi0 = np.array([0.2, 0.1])
        om = np.array([[0.3, -0.2]])
        g_chi, g_om = mk.cost_gradient(problem, mk.DecisionVector(chi0, om))
        # J = |chi0-prior|^2 + om' W om + (y0-chi0)' V (y0-chi0)
        expect_chi = 2 * (chi0 - prior) - 2 * np.diag([4.0, 5.0]) @ (y0 - chi0)
        expect_om = 2 * np.diag([2.0, 3.0]) @ om[0]
        np.testing.assert_allclose(g_chi, expect_chi, rtol=0, atol=1e-12)
        np.testing.assert_allclose(g_om[0], expect_om, rtol=0, atol=1e-12)


class TestSolveSuboptimal:
    def test_zero_budget_returns_candidate_unchanged(self, window):
        problem, candidate = window
        d, report = mk.solve_suboptimal(
            problem, candidate, mk.SolverConfig(max_iterations=0)
        )
        assert d is candidate
        assert report.iterations_used == 0
        np.testing.assert_array_equal(
            report.cost_trace, [mk.eval_cost(problem, candidate)]
        )

    def test_optimal_candidate_converges_immediately(self, reactor, quad_cost):
        log = mk.simulate(reactor, [4.0, 1.0], np.zeros((6, 2)), np.zeros((6, 1)), 6)
        problem = mk.HorizonProblem(
            model=reactor, cost=quad_cost, horizon=6,
            prior=log.states[0], measurements=log.outputs,
        )
        candidate = mk.DecisionVector(log.states[0], np.zeros((6, 2)))
        d, report = mk.solve_suboptimal(
            problem, candidate, mk.SolverConfig(max_iterations=5)
        )
        assert report.converged
        assert report.iterations_used == 0
        assert d is candidate

    def test_budget_ordering_on_case_study_window(self, window):
        problem, candidate = window
        costs = {}
        for budget in (0, 2, 5):
            _, report = mk.solve_suboptimal(
                problem, candidate, mk.SolverConfig(max_iterations=budget)
            )
            costs[budget] = report.cost_trace[-1]
        assert costs[5] <= costs[2] <= costs[0]
        assert costs[2] < costs[0]  # the warm start is far from optimal here

    def test_budget_dominance_sweep(self, window):
        problem, candidate = window
        previous = np.inf
        for budget in range(9):
            _, report = mk.solve_suboptimal(
                problem, candidate, mk.SolverConfig(max_iterations=budget)
            )
            assert report.cost_trace[-1] <= previous + 1e-15
            previous = report.cost_trace[-1]

    def test_monotone_trace_all_step_rules(self, window):
        problem, candidate = window
        for rule in ("gn", "bb", "fixed"):
            _, report = mk.solve_suboptimal(
                problem, candidate,
                mk.SolverConfig(max_iterations=12, step_rule=rule),
            )
            assert np.all(np.diff(report.cost_trace) <= 0)
            assert report.cost_trace[0] == mk.eval_cost(problem, candidate)
            assert report.feasibility_residual <= 1e-9

    def test_infeasible_candidate_rejected(self, window):
        problem, candidate = window
        pinned = replace(
            problem.model, disturbance_set=BoxSet([0.0, 0.0], [0.0, 0.0])
        )
        bad_problem = mk.HorizonProblem(
            model=pinned, cost=problem.cost, horizon=problem.horizon,
            prior=problem.prior, measurements=problem.measurements,
            start=problem.start,
        )
        with pytest.raises(InfeasibleCandidateError):
            mk.solve_suboptimal(bad_problem, candidate, mk.SolverConfig())

    def test_line_search_failure_returns_candidate(self, reactor, quad_cost):
        # Pin the residual set to {0} with data consistent only with the
        # candidate; with few backtracks every step is rejected.
        pinned = replace(reactor, noise_set=BoxSet([0.0], [0.0]))
        x0 = np.array([4.0, 1.5])
        x = x0.copy()
        ys = np.empty((3, 1))
        for i in range(3):
            ys[i] = pinned.h(x)
            x = pinned.f(x)
        problem = mk.HorizonProblem(
            model=pinned, cost=quad_cost, horizon=3,
            prior=x0 + np.array([0.5, -0.2]), measurements=ys,
        )
        candidate = mk.DecisionVector(x0, np.zeros((3, 2)))
        d, report = mk.solve_suboptimal(
            problem, candidate,
            mk.SolverConfig(max_iterations=5, max_backtracks=3),
        )
        assert d is candidate
        assert report.iterations_used == 0
        assert mk.check_feasible(problem, d).feasible

    def test_contract_on_randomized_windows(self, reactor, quad_cost):
        rng = np.random.default_rng(8)
        for _ in range(40):
            m = int(rng.integers(1, 8))
            chi0 = rng.uniform(1, 5, 2)
            oms = rng.normal(0, 0.2, (m, 2))
            x = chi0.copy()
            ys = np.empty((m, 1))
            for i in range(m):
                ys[i] = reactor.h(x) + rng.normal(0, 0.5)
                x = reactor.f(x) + oms[i]
            problem = mk.HorizonProblem(
                model=reactor, cost=quad_cost, horizon=m,
                prior=rng.uniform(1, 5, 2), measurements=ys,
            )
            candidate = mk.DecisionVector(chi0, oms)
            budget = int(rng.integers(0, 7))
            d, report = mk.solve_suboptimal(
                problem, candidate, mk.SolverConfig(max_iterations=budget)
            )
            assert mk.check_feasible(problem, d).feasible
            j_cand = mk.eval_cost(problem, candidate)
            assert mk.eval_cost(problem, d) <= j_cand + 1e-12


class TestSolveConverged:
    def test_matches_weighted_least_squares_oracle(self):
        model = linear_model()
        cost = mk.quadratic_cost(
            np.diag([4.0, 2.0]), np.array([[3.0]]), np.diag([1.0, 2.0])
        )
        rng = np.random.default_rng(5)
        m = 6
        ys = rng.normal(0, 1, (m, 1))
        prior = rng.normal(0, 1, 2)
        problem = mk.HorizonProblem(
            model=model, cost=cost, horizon=m, prior=prior, measurements=ys
        )
        candidate = mk.DecisionVector(np.zeros(2), np.zeros((m, 2)))

        # independent oracle: stacked weighted residuals are affine in the
        # decision, so probe the map on basis vectors and solve by lstsq
        sq_p = np.linalg.cholesky(cost.quad.prior).T
        sq_w = np.linalg.cholesky(cost.quad.disturbance).T
        sq_v = np.linalg.cholesky(cost.quad.noise).T

        def residual(u):
            d = mk.DecisionVector(u[:2], u[2:].reshape(m, 2))
            ro = mk.rollout(problem, d)
            parts = [sq_p @ (d.chi0 - prior)]
            for i in range(m):
                parts.append(sq_w @ d.omegas[i])
                parts.append(sq_v @ ro.residuals[i])
            return np.concatenate(parts)

        dim = 2 + 2 * m
        r0 = residual(np.zeros(dim))
        basis = np.column_stack(
            [residual(np.eye(dim)[j]) - r0 for j in range(dim)]
        )
        expected, *_ = np.linalg.lstsq(basis, -r0, rcond=None)

        d, report = mk.solve_converged(problem, candidate, mk.SolverConfig())
        got = np.concatenate([d.chi0, d.omegas.ravel()])
        assert report.converged
        assert np.max(np.abs(got - expected)) < 1e-6

    def test_already_optimal_takes_no_iterations(self, reactor, quad_cost):
        log = mk.simulate(reactor, [4.0, 1.0], np.zeros((4, 2)), np.zeros((4, 1)), 4)
        problem = mk.HorizonProblem(
            model=reactor, cost=quad_cost, horizon=4,
            prior=log.states[0], measurements=log.outputs,
        )
        candidate = mk.DecisionVector(log.states[0], np.zeros((4, 2)))
        _, report = mk.solve_converged(problem, candidate, mk.SolverConfig())
        assert report.iterations_used == 0
        assert report.converged

    def test_converged_cost_below_every_budget(self, window):
        problem, candidate = window
        _, conv = mk.solve_converged(problem, candidate, mk.SolverConfig())
        for budget in (0, 2, 5):
            _, rep = mk.solve_suboptimal(
                problem, candidate, mk.SolverConfig(max_iterations=budget)
            )
            assert conv.cost_trace[-1] <= rep.cost_trace[-1] + 1e-15

    def test_generic_path_converges_to_same_point(self, window):
        problem, candidate = window
        d_fast, _ = mk.solve_converged(problem, candidate, mk.SolverConfig())
        with mk.force_generic():
            d_slow, _ = mk.solve_converged(problem, candidate, mk.SolverConfig())
        np.testing.assert_allclose(d_fast.chi0, d_slow.chi0, rtol=0, atol=1e-10)
        np.testing.assert_allclose(d_fast.omegas, d_slow.omegas, rtol=0, atol=1e-10)


class TestCheckpoints:
    def test_checkpoints_match_standalone_runs(self, window):
        problem, candidate = window
        per_budget, final = mk.solve_with_checkpoints(
            problem, candidate, mk.SolverConfig(), budgets=(0, 2, 5)
        )
        for budget in (0, 2, 5):
            d_alone, rep_alone = mk.solve_suboptimal(
                problem, candidate, mk.SolverConfig(max_iterations=budget)
            )
            d_chk, rep_chk = per_budget[budget]
            assert np.array_equal(d_alone.chi0, d_chk.chi0)
            assert np.array_equal(d_alone.omegas, d_chk.omegas)
            assert rep_alone.iterations_used == rep_chk.iterations_used
            assert rep_alone.converged == rep_chk.converged
            np.testing.assert_array_equal(rep_alone.cost_trace, rep_chk.cost_trace)
        d_conv, rep_conv = mk.solve_converged(problem, candidate, mk.SolverConfig())
        assert np.array_equal(final[0].chi0, d_conv.chi0)
        np.testing.assert_array_equal(final[1].cost_trace, rep_conv.cost_trace)


class TestSolverConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            mk.SolverConfig(max_iterations=-1)
        with pytest.raises(ValueError):
            mk.SolverConfig(armijo_c=1.5)
        with pytest.raises(ValueError):
            mk.SolverConfig(step_rule="newton")
