import numpy as np
import pytest

import gaussian_bridge
from conftest import random_spd
from utils.errors import DimensionMismatch, IndexOutOfRange, InfeasibleBridge
from utils.gaussians import GaussianComponent


def _random_pair(rng, n):
    return (
        GaussianComponent(rng.standard_normal(n), random_spd(rng, n)),
        GaussianComponent(rng.standard_normal(n), random_spd(rng, n)),
    )


@pytest.mark.parametrize("n", [1, 2, 4])
def test_kernels_carry_the_closed_form_marginals(rng, n):
    for _ in range(17):
        rho0, rhoN = _random_pair(rng, n)
        sched = gaussian_bridge.solve_gaussian_sb(rho0, rhoN, N=10, eps=5.0)
        sigma = rho0.cov
        mu = rho0.mean
        for k in range(sched.N):
            G = sched.gains[k]
            mu = G @ mu + sched.offsets[k]
            sigma = G @ sigma @ G.T + sched.kernel_covs[k]
            scale = np.linalg.norm(sched.sigma_path[k + 1])
            assert np.linalg.norm(sigma - sched.sigma_path[k + 1]) <= 1e-8 * scale
            np.testing.assert_allclose(mu, sched.mu_path[k + 1], atol=1e-10)
        assert np.linalg.norm(sigma - rhoN.cov) <= 1e-6 * np.linalg.norm(rhoN.cov)
        m0 = gaussian_bridge.marginal_at(sched, 0)
        mN = gaussian_bridge.marginal_at(sched, sched.N)
        np.testing.assert_allclose(m0.mean, rho0.mean)
        np.testing.assert_allclose(mN.mean, rhoN.mean, atol=1e-12)
        np.testing.assert_allclose(mN.cov, rhoN.cov)


def test_cost_equals_sum_of_step_kl(rng):
    for n in (1, 2, 3):
        rho0, rhoN = _random_pair(rng, n)
        for N, dt in ((1, 1.0), (4, 0.5), (12, 0.25)):
            sched = gaussian_bridge.solve_gaussian_sb(rho0, rhoN, N=N, eps=20.0, dt=dt)
            assert sched.cost == pytest.approx(np.sum(gaussian_bridge.expected_step_kl(sched)), rel=1e-6, abs=1e-9)
            assert sched.cost >= 0.0


def test_mean_shift_adds_squared_distance_over_twice_horizon_noise():
    cov = 0.3 * np.eye(2)
    base = gaussian_bridge.solve_gaussian_sb((np.zeros(2), cov), (np.zeros(2), cov), N=5, eps=0.2)
    shift = np.array([1.0, -2.0])
    moved = gaussian_bridge.solve_gaussian_sb((np.zeros(2), cov), (shift, cov), N=5, eps=0.2)
    e = 0.2 * 5
    assert moved.cost - base.cost == pytest.approx(shift @ shift / (2 * e), rel=1e-12)


def test_scalar_feasibility_threshold():
    rho0 = (np.zeros(1), np.array([[0.1]]))
    # eps * T = 0.1, so the target variance must stay below 0.2
    gaussian_bridge.solve_gaussian_sb(rho0, (np.zeros(1), np.array([[0.15]])), N=10, eps=0.01)
    with pytest.raises(InfeasibleBridge):
        gaussian_bridge.solve_gaussian_sb(rho0, (np.zeros(1), np.array([[0.25]])), N=10, eps=0.01)


def test_kernel_covariances_are_spd_and_shrink_from_reference(rng):
    rho0, rhoN = _random_pair(rng, 3)
    sched = gaussian_bridge.solve_gaussian_sb(rho0, rhoN, N=6, eps=4.0)
    for k in range(sched.N):
        w = np.linalg.eigvalsh(sched.kernel_covs[k])
        assert w.min() > 0.0
        assert w.max() < sched.step_noise


def test_continuous_quantities_agree_on_the_grid(rng):
    rho0, rhoN = _random_pair(rng, 2)
    sched = gaussian_bridge.solve_gaussian_sb(rho0, rhoN, N=8, eps=20.0, dt=0.125)
    x = rng.standard_normal(2)
    for k in range(1, sched.N):
        t = k * sched.dt
        np.testing.assert_allclose(gaussian_bridge.marginal_at_time(sched, t).cov, sched.sigma_path[k], atol=1e-10)
        np.testing.assert_allclose(
            gaussian_bridge.drift_at_time(sched, t, x), gaussian_bridge.step_drift(sched, k, x), atol=1e-10
        )


def test_kernel_at_and_index_errors(rng):
    rho0, rhoN = _random_pair(rng, 2)
    sched = gaussian_bridge.solve_gaussian_sb(rho0, rhoN, N=3, eps=5.0)
    x = np.array([0.5, -0.5])
    kern = gaussian_bridge.kernel_at(sched, 1, x)
    np.testing.assert_allclose(kern.mean, sched.gains[1] @ x + sched.offsets[1])
    with pytest.raises(IndexOutOfRange):
        gaussian_bridge.kernel_at(sched, 3, x)
    with pytest.raises(IndexOutOfRange):
        gaussian_bridge.marginal_at(sched, 4)
    with pytest.raises(IndexOutOfRange):
        gaussian_bridge.marginal_at_time(sched, sched.T + 1.0)


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        gaussian_bridge.solve_gaussian_sb((np.zeros(1), np.eye(1)), (np.zeros(2), np.eye(2)), N=3, eps=1.0)


def test_scalar_q0_matches_direct_formula():
    s2, eps, N = 0.1, 0.01, 10
    e = eps * N
    expected = e * s2 / (s2 + e / 2 - np.sqrt(s2 * s2 + e * e / 4))
    sched = gaussian_bridge.solve_gaussian_sb((np.zeros(1), [[s2]]), (np.zeros(1), [[s2]]), N=N, eps=eps)
    assert sched.Q0[0, 0] == pytest.approx(expected, rel=1e-10)


def test_scalar_cost_matches_direct_formula():
    s0, sN, eps, N = 1.0, 1.0, 0.1, 10
    e = eps * N
    q0 = e * s0 / (s0 + e / 2 - np.sqrt(s0 * sN + e * e / 4))
    v = sN - (1 - e / q0) ** 2 * s0
    expected = 0.5 * (2 * s0 / q0 - np.log(v) + np.log(e) - 1 + (sN - s0) / e)
    sched = gaussian_bridge.solve_gaussian_sb((np.zeros(1), [[s0]]), (np.zeros(1), [[sN]]), N=N, eps=eps)
    assert sched.cost == pytest.approx(expected, rel=1e-10)
    assert sched.cost >= 0.0


def test_equal_boundaries_give_a_symmetric_schedule():
    cov = 0.4 * np.eye(3)
    mean = np.array([1.0, -1.0, 0.5])
    sched = gaussian_bridge.solve_gaussian_sb((mean, cov), (mean, cov), N=10, eps=0.3)
    np.testing.assert_allclose(sched.mu_path, np.tile(mean, (11, 1)), atol=1e-15)
    for k in range(sched.N + 1):
        np.testing.assert_allclose(sched.sigma_path[k], sched.sigma_path[sched.N - k], atol=1e-9)
