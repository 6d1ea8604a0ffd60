import numpy as np
import pytest
from scipy.optimize import minimize

import covariance_steering
from covariance_steering import LinearDynamics, SteeringOptions
from utils.errors import SteeringInfeasible, Uncontrollable
from utils.gaussians import GaussianComponent


def _scalar(a, b, d2, N):
    return LinearDynamics.time_invariant([[a]], [[b]], [[np.sqrt(d2)]], N)


def _brute_force(a, b, d2, s0, target, N):
    """Grid and refine over the first N-1 gains, last gain from the terminal constraint"""

    def cost(first):
        sigma, total = s0, 0.0
        for K in np.atleast_1d(first):
            total += K * K * sigma
            sigma = (a + b * K) ** 2 * sigma + d2
        need = (target - d2) / sigma
        if need < 0.0:
            return np.inf
        return min(total + ((s * np.sqrt(need) - a) / b) ** 2 * sigma for s in (1.0, -1.0))

    if N == 1:
        return cost([])
    grid = np.linspace(-3.0, 3.0, 121)
    mesh = np.stack(np.meshgrid(*[grid] * (N - 1), indexing="ij"), axis=-1).reshape(-1, N - 1)
    start = min(mesh, key=cost)
    res = minimize(cost, start, method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-13, "maxiter": 20000})
    return min(res.fun, cost(start))


def test_scalar_expansion_known_optimum():
    dyn = _scalar(1.0, 1.0, 0.0, 2)
    sol = covariance_steering.solve_covariance_steering(dyn, [[1.0]], [[4.0]])
    assert sol.cost == pytest.approx(0.5, abs=1e-6)
    np.testing.assert_allclose(sol.gains[:, 0, 0], [0.5, 1.0 / 3.0], atol=1e-4)
    assert sol.terminal_error < 1e-6


def test_scalar_instances_match_brute_force():
    rng = np.random.default_rng(7)
    for _ in range(20):
        a, b = rng.uniform(0.8, 1.2), rng.uniform(0.5, 1.5)
        d2 = rng.uniform(0.0, 0.1)
        s0, target = rng.uniform(0.5, 2.0), rng.uniform(0.5, 4.0)
        N = int(rng.integers(1, 4))
        dyn = _scalar(a, b, d2, N)
        sol = covariance_steering.solve_covariance_steering(dyn, [[s0]], [[target]])
        assert sol.cost == pytest.approx(_brute_force(a, b, d2, s0, target, N), abs=1e-4)
        reached = covariance_steering.propagate_covariance(dyn, sol.gains, [[s0]])
        assert abs(reached[-1, 0, 0] - target) <= 1e-6 * target


def test_double_integrator_hits_terminal_covariance():
    dyn = covariance_steering.double_integrator(20, 0.05, 0.01)
    sol = covariance_steering.solve_covariance_steering(dyn, 0.5 * np.eye(4), 0.2 * np.eye(4))
    assert sol.terminal_error < 1e-6
    reached = covariance_steering.propagate_covariance(dyn, sol.gains, 0.5 * np.eye(4))
    assert np.linalg.norm(reached[-1] - 0.2 * np.eye(4)) < 1e-6 * np.linalg.norm(0.2 * np.eye(4))
    assert np.array_equal(sol.sigma_path[-1], 0.2 * np.eye(4))


def test_mean_steering_random_walk():
    dyn = covariance_steering.random_walk(2, 10, 0.01)
    v, mu = covariance_steering.solve_mean_steering(dyn, np.zeros(2), np.array([5.0, 0.0]))
    np.testing.assert_allclose(v, np.tile([0.5, 0.0], (10, 1)), atol=1e-12)
    np.testing.assert_allclose(mu[-1], [5.0, 0.0], atol=1e-12)
    assert np.sum(v * v) == pytest.approx(2.5)


def test_density_steering_cost_identity():
    dyn = covariance_steering.random_walk(2, 10, 0.01)
    policy = covariance_steering.solve_density_steering(
        dyn, GaussianComponent(np.zeros(2), 0.1 * np.eye(2)), GaussianComponent(np.array([0.0, 5.0]), 0.3 * np.eye(2))
    )
    assert covariance_steering.ds_cost(policy) == pytest.approx(policy.cost, rel=1e-10)
    assert policy.mean_cost == pytest.approx(2.5)
    np.testing.assert_allclose(policy.marginal_at(10).cov, 0.3 * np.eye(2), atol=1e-6)
    X = np.array([[0.1, -0.2], [0.0, 0.0]])
    u = policy.control(0, X)
    np.testing.assert_allclose(u[1], policy.feedforward[0])


def test_gramian_of_random_walk():
    dyn = covariance_steering.random_walk(3, 4, 0.1)
    np.testing.assert_allclose(covariance_steering.controllability_gramian(dyn), 4.0 * np.eye(3))


def test_uncontrollable_pairs_are_rejected():
    with pytest.raises(Uncontrollable):
        LinearDynamics.time_invariant(np.eye(2), np.zeros((2, 1)), np.eye(2), 3)
    with pytest.raises(Uncontrollable):
        LinearDynamics.time_invariant(np.eye(2), [[1.0], [0.0]], np.eye(2), 5)


def test_target_below_noise_floor_is_infeasible():
    dyn = _scalar(1.0, 1.0, 1.0, 1)
    with pytest.raises(SteeringInfeasible) as info:
        covariance_steering.solve_covariance_steering(dyn, [[1.0]], [[0.5]], options=SteeringOptions(max_outer=15))
    assert info.value.residual > 1e-6


def test_moving_the_target_mean_keeps_the_gains():
    dyn = covariance_steering.double_integrator(20, 0.05, 0.01)
    start = GaussianComponent(np.array([-5.0, 2.0, 20.0, 0.0]), 0.5 * np.eye(4))
    policies = [
        covariance_steering.solve_density_steering(dyn, start, GaussianComponent(np.array(mean), 0.2 * np.eye(4)))
        for mean in ([5.0, -3.0, 0.0, 0.0], [5.0, 3.0, 0.0, 0.0])
    ]
    np.testing.assert_array_equal(policies[0].gains, policies[1].gains)
    assert policies[0].covariance_cost == policies[1].covariance_cost
    assert policies[0].mean_cost != pytest.approx(policies[1].mean_cost)


def test_double_integrator_mean_reaches_target():
    dyn = covariance_steering.double_integrator(20, 0.05, 0.01)
    mu0, muN = np.array([-5.0, -2.0, 20.0, 0.0]), np.array([5.0, 3.0, 0.0, 0.0])
    v, mu = covariance_steering.solve_mean_steering(dyn, mu0, muN)
    x = mu0
    for k in range(dyn.N):
        x = dyn.A[k] @ x + dyn.B[k] @ v[k]
    assert np.linalg.norm(x - muN) < 1e-9
    assert np.array_equal(mu[-1], muN)
