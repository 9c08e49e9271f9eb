import numpy as np
import pytest

from rbj.cost import QuadraticCost, RobustCost
from rbj.graph import build_graph
from rbj.oracle import RateFit, fit_rate, solve_newton, solve_wls, stacked_gradient, stacked_hessian

from conftest import blocks_of, random_instance


def test_wls_identity_measurements():
    g = build_graph(2, [(0, 1)], (1, 1))
    y = [np.array([3.0]), np.array([-1.0])]
    A = {(0, 0): np.eye(1), (0, 1): np.zeros((1, 1)), (1, 0): np.zeros((1, 1)), (1, 1): np.eye(1)}
    sol = solve_wls(QuadraticCost(g, y, A))
    assert np.allclose(sol.x_star, [3.0, -1.0])
    assert sol.solver == "closed_form"


def test_wls_hand_solved_instance():
    # A = [[1,0],[1,1]], y = (1,2), W = I  ->  x* = (1,1)
    g = build_graph(2, [(0, 1)], (1, 1))
    y = [np.array([1.0]), np.array([2.0])]
    A = {(0, 0): np.eye(1), (0, 1): np.zeros((1, 1)), (1, 0): np.eye(1), (1, 1): np.eye(1)}
    sol = solve_wls(QuadraticCost(g, y, A))
    assert np.allclose(sol.x_star, [1.0, 1.0], atol=1e-12)


def test_wls_normal_equations_residual():
    g, c = random_instance(60, "quadratic", num_agents=8, max_dim=3)
    assert g.total_dim >= 10
    sol = solve_wls(c)
    grad = stacked_gradient(c, sol.x_star)
    assert np.max(np.abs(grad)) <= 1e-10 * (1 + np.max(np.abs(stacked_gradient(c, np.zeros(g.total_dim)))))


def test_newton_near_quadratic_converges_fast():
    for seed in range(3):
        g, c = random_instance(70 + seed, "robust", num_agents=5, nu=1e4)
        sol = solve_newton(c, np.zeros(g.total_dim))
        assert sol.iterations <= 5
        assert sol.solver == "newton"


def test_newton_scalar_symmetric_minimum():
    # J(x) = sqrt((1 - x)^2 + 1)  ->  x* = 1
    g = build_graph(1, [], [1])
    c = RobustCost(g, [np.array([1.0])], {(0, 0): np.eye(1)}, nu=1.0)
    sol = solve_newton(c, np.array([-4.0]))
    assert sol.x_star == pytest.approx(1.0, abs=1e-9)
    assert sol.grad_inf <= 1e-10 * (1 + 1)


def test_newton_iteration_cap():
    g = build_graph(1, [], [1])
    c = RobustCost(g, [np.array([1.0])], {(0, 0): np.eye(1)}, nu=1.0)
    with pytest.raises(RuntimeError, match="did not converge"):
        solve_newton(c, np.array([50.0]), max_iter=2)


def test_fit_rate_exact_geometric():
    t = np.arange(200)
    fit = fit_rate(2.0 * 0.9**t)
    assert fit.ok
    assert fit.rho == pytest.approx(0.9, abs=1e-6)
    assert fit.c == pytest.approx(2.0, rel=1e-6)


def test_fit_rate_envelope_dominates_tail():
    rng = np.random.default_rng(0)
    err = 5.0 * 0.97 ** np.arange(300) * np.exp(0.05 * rng.standard_normal(300))
    fit = fit_rate(err)
    assert fit.ok and 0 < fit.rho < 1
    t0 = int(0.4 * 300)
    t = np.arange(t0, 300)
    assert np.all(err[t0:] <= fit.c * fit.rho**t * (1 + 1e-12))


def test_fit_rate_failure_reports():
    assert not fit_rate(np.ones(100)).ok  # never decreases
    assert not fit_rate(np.linspace(1, 2, 100)).ok  # diverging
    assert not fit_rate(2.0 * 0.9 ** np.arange(20)).ok  # too short
    fit = fit_rate(np.concatenate([np.ones(50), np.full(50, np.inf)]))
    assert not fit.ok and "non-finite" in fit.detail


def test_oracle_agreement_wls_vs_huge_nu_newton():
    g, c = random_instance(61, "quadratic")
    unweighted = QuadraticCost(g, c.y, c.A)  # W = I to match the robust family
    sol_q = solve_wls(unweighted)
    robust = RobustCost(g, c.y, c.A, nu=1e8)
    sol_r = solve_newton(robust, np.zeros(g.total_dim))
    assert np.max(np.abs(sol_q.x_star - sol_r.x_star)) <= 1e-6


def test_hessian_diagonal_blocks_match_xi_sums():
    for family in ("quadratic", "robust"):
        g, c = random_instance(62, family)
        rng = np.random.default_rng(9)
        x = rng.standard_normal(g.total_dim)
        blocks = blocks_of(g, x)
        H = stacked_hessian(c, x)
        for i in range(g.num_agents):
            D_i = sum(c.xi_block(j, i, blocks) for j in g.closed_neighborhood(i))
            sl = g.block_slice(i)
            assert np.max(np.abs(H[sl, sl] - D_i)) <= 1e-10 * (1 + np.max(np.abs(D_i)))


def test_solver_type_checks():
    g, cq = random_instance(63, "quadratic")
    g2, cr = random_instance(63, "robust")
    with pytest.raises(TypeError):
        solve_wls(cr)
    with pytest.raises(TypeError):
        solve_newton(cq, np.zeros(g.total_dim))
