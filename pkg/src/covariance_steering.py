"""Minimum-effort steering of a linear stochastic system between Gaussians.

The policy is u_k = K_k (x_k - mu_k) + v_k. Means and covariances separate:
the feedforward v_k is the minimum-norm solution of the terminal mean
condition, and the gains K_k solve the covariance subproblem

    min sum_k tr(K_k Sigma_k K_k^T)
    s.t. Sigma_{k+1} = F_k Sigma_k F_k^T + D_k D_k^T,  F_k = A_k + B_k K_k,
         Sigma_N = target,

which is handled by an augmented Lagrangian on the terminal constraint with
L-BFGS inner solves and an adjoint (backward Lyapunov) gradient. Only the
gains are decision variables and the covariance path is recovered by
propagation, so the solve starts from K = 0 without an interpolated
covariance guess.
"""
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

import matrix_kit
from utils.errors import DimensionMismatch, IndexOutOfRange, NotSPD, SteeringInfeasible, Uncontrollable
from utils.gaussians import GaussianComponent

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SteeringOptions:
    eps_reg: float = 1e-9
    max_outer: int = 500
    max_inner: int = 1000
    penalty_init: float = 10.0
    penalty_growth: float = 10.0
    penalty_max: float = 1e8
    stationarity_tol: float = 1e-6
    terminal_tol: float = 1e-6
    # Outer loop keeps tightening the terminal residual down to this before stopping
    terminal_target: float = 1e-10


@dataclass(frozen=True)
class LinearDynamics:
    A: np.ndarray  # (N, n, n)
    B: np.ndarray  # (N, n, m)
    D: np.ndarray  # (N, n, l)

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        B = np.asarray(self.B, dtype=float)
        D = np.asarray(self.D, dtype=float)
        if A.ndim != 3 or B.ndim != 3 or D.ndim != 3:
            raise DimensionMismatch("A, B, D must be stacked per step as 3-d arrays", module=__name__)
        N, n, n2 = A.shape
        if n != n2 or B.shape[:2] != (N, n) or D.shape[:2] != (N, n):
            raise DimensionMismatch(
                f"inconsistent dynamics shapes A{A.shape} B{B.shape} D{D.shape}", module=__name__
            )
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "D", D)
        try:
            matrix_kit.check_spd(controllability_gramian(self), "controllability Gramian")
        except NotSPD as exc:
            raise Uncontrollable(f"(A, B) is not controllable over {N} steps: {exc}") from exc

    @classmethod
    def time_invariant(cls, A, B, D, N):
        A, B, D = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (A, B, D))
        return cls(np.repeat(A[None], N, 0), np.repeat(B[None], N, 0), np.repeat(D[None], N, 0))

    @property
    def N(self):
        return self.A.shape[0]

    @property
    def n(self):
        return self.A.shape[1]

    @property
    def m(self):
        return self.B.shape[2]

    def noise_cov(self, k):
        return self.D[k] @ self.D[k].T

    def transition(self, end, start):
        """State transition A_{end-1} ... A_start (identity when end == start)"""
        phi = np.eye(self.n)
        for k in range(start, end):
            phi = self.A[k] @ phi
        return phi


def random_walk(n, N, eps, dt=1.0):
    """x_{k+1} = x_k + u_k + sqrt(eps dt) w_k"""
    eye = np.eye(n)
    return LinearDynamics.time_invariant(eye, eye, np.sqrt(eps * dt) * eye, N)


def double_integrator(N, dt, eps, axes=2):
    """Planar double integrator with state (positions, velocities), noise on velocities"""
    eye, zero = np.eye(axes), np.zeros((axes, axes))
    A = np.block([[eye, dt * eye], [zero, eye]])
    B = np.vstack([0.5 * dt * dt * eye, dt * eye])
    D = np.sqrt(eps * dt) * np.vstack([zero, eye])
    return LinearDynamics.time_invariant(A, B, D, N)


def controllability_gramian(dyn):
    W = np.zeros((dyn.n, dyn.n))
    phi = np.eye(dyn.n)
    # Walk backwards so phi = A_{N-1} ... A_{k+1}
    for k in range(dyn.N - 1, -1, -1):
        PB = phi @ dyn.B[k]
        W += PB @ PB.T
        phi = phi @ dyn.A[k]
    return matrix_kit.symmetrize(W)


@dataclass(frozen=True)
class CovarianceSolution:
    gains: np.ndarray        # (N, m, n)
    sigma_path: np.ndarray   # (N+1, n, n)
    cost: float
    terminal_error: float
    stationarity: float
    iterations: int


@dataclass(frozen=True)
class AffinePolicy:
    """Affine feedback u_k = K_k (x - mu_k) + v_k and the marginals it induces"""

    dynamics: LinearDynamics
    gains: np.ndarray
    feedforward: np.ndarray
    mu_path: np.ndarray
    sigma_path: np.ndarray
    mean_cost: float
    covariance_cost: float
    eps_reg: float = 1e-9
    info: dict = field(default_factory=dict)

    @property
    def N(self):
        return self.gains.shape[0]

    @property
    def cost(self):
        return self.mean_cost + self.covariance_cost

    def control(self, k, X):
        """Controls for a batch of states at step k, shape (M, m)"""
        X = np.atleast_2d(X)
        return (X - self.mu_path[k]) @ self.gains[k].T + self.feedforward[k]

    def marginal_at(self, k):
        if not 0 <= k <= self.N:
            raise IndexOutOfRange(f"step {k} outside [0, {self.N}]", module=__name__)
        return GaussianComponent(self.mu_path[k], self.sigma_path[k])

    def density_cov(self, k):
        """Marginal covariance used for density evaluation, floored by eps_reg"""
        return self.sigma_path[k] + self.eps_reg * np.eye(self.sigma_path.shape[1])


def solve_mean_steering(dyn, mu0, muN):
    """Minimum-norm feedforward steering the mean from mu0 to muN.

    Returns (v, mu_path) with v of shape (N, m) and mu_path of shape (N+1, n).
    """
    mu0 = np.asarray(mu0, dtype=float)
    muN = np.asarray(muN, dtype=float)
    if mu0.shape != (dyn.n,) or muN.shape != (dyn.n,):
        raise DimensionMismatch(f"means must have length {dyn.n}", module=__name__)
    W = controllability_gramian(dyn)
    try:
        matrix_kit.check_spd(W, "controllability Gramian")
    except NotSPD as exc:
        raise Uncontrollable(str(exc)) from exc
    y = np.linalg.solve(W, muN - dyn.transition(dyn.N, 0) @ mu0)

    v = np.empty((dyn.N, dyn.m))
    for k in range(dyn.N):
        v[k] = dyn.B[k].T @ dyn.transition(dyn.N, k + 1).T @ y

    mu_path = np.empty((dyn.N + 1, dyn.n))
    mu_path[0] = mu0
    for k in range(dyn.N):
        mu_path[k + 1] = dyn.A[k] @ mu_path[k] + dyn.B[k] @ v[k]
    logger.debug("mean steering terminal error %.3e", np.linalg.norm(mu_path[-1] - muN))
    # Terminal mean is reported exactly as requested
    mu_path[-1] = muN
    return v, mu_path


def propagate_covariance(dyn, gains, sigma0):
    sigma = np.empty((dyn.N + 1, dyn.n, dyn.n))
    sigma[0] = sigma0
    for k in range(dyn.N):
        F = dyn.A[k] + dyn.B[k] @ gains[k]
        sigma[k + 1] = matrix_kit.symmetrize(F @ sigma[k] @ F.T + dyn.noise_cov(k))
    return sigma


def _covariance_effort(gains, sigma):
    return float(sum(np.trace(K @ S @ K.T) for K, S in zip(gains, sigma)))


class _AugmentedLagrangian:
    """Objective, adjoint gradient and residuals for the covariance subproblem"""

    def __init__(self, dyn, sigma0, sigma_target, eps_reg):
        self.dyn = dyn
        self.sigma0 = sigma0
        self.target = sigma_target
        self.scale = np.linalg.norm(sigma_target)
        self.eps_reg = eps_reg
        self.shape = (dyn.N, dyn.m, dyn.n)

    def residual(self, sigma):
        return (sigma[-1] - self.target) / self.scale

    def gradient(self, gains, sigma, terminal_adjoint):
        dyn = self.dyn
        grad = np.empty(self.shape)
        pi = terminal_adjoint
        for k in range(dyn.N - 1, -1, -1):
            K = gains[k]
            F = dyn.A[k] + dyn.B[k] @ K
            grad[k] = 2.0 * (K + dyn.B[k].T @ pi @ F) @ sigma[k]
            pi = matrix_kit.symmetrize(K.T @ K + F.T @ pi @ F)
        return grad

    def value_and_grad(self, flat, multiplier, penalty):
        gains = flat.reshape(self.shape)
        sigma = propagate_covariance(self.dyn, gains, self.sigma0)
        c = self.residual(sigma)
        value = _covariance_effort(gains, sigma) + np.sum(multiplier * c) + 0.5 * penalty * np.sum(c * c)
        adjoint = (multiplier + penalty * c) / self.scale
        return value, self.gradient(gains, sigma, adjoint).ravel()

    def stationarity(self, gains, sigma, multiplier):
        """Gain-space residual max_k |grad_k (Sigma_k + eps_reg I)^-1| / 2"""
        grad = self.gradient(gains, sigma, multiplier / self.scale)
        eye = np.eye(self.dyn.n)
        worst = 0.0
        for k in range(self.dyn.N):
            scaled = np.linalg.solve(sigma[k] + self.eps_reg * eye, grad[k].T).T
            worst = max(worst, 0.5 * np.linalg.norm(scaled))
        return worst


def solve_covariance_steering(dyn, Sigma0, SigmaN, eps_reg=None, options=None):
    options = options or SteeringOptions()
    if eps_reg is not None:
        options = replace(options, eps_reg=eps_reg)
    sigma0 = matrix_kit.as_sym(Sigma0, "Sigma_0")
    target = matrix_kit.as_sym(SigmaN, "Sigma_N")
    for name, S in (("Sigma_0", sigma0), ("Sigma_N", target)):
        if S.shape != (dyn.n, dyn.n):
            raise DimensionMismatch(f"{name} must be {dyn.n}x{dyn.n}", module=__name__)
        matrix_kit.check_spd(S, name)

    problem = _AugmentedLagrangian(dyn, sigma0, target, options.eps_reg)
    flat = np.zeros(dyn.N * dyn.m * dyn.n)
    multiplier = np.zeros((dyn.n, dyn.n))
    penalty = options.penalty_init
    previous = np.inf
    terminal = stationarity = np.inf

    for outer in range(1, options.max_outer + 1):
        result = minimize(
            problem.value_and_grad, flat, args=(multiplier, penalty), jac=True, method="L-BFGS-B",
            options={"maxiter": options.max_inner, "gtol": 1e-12, "ftol": 1e-16, "maxcor": 30},
        )
        flat = result.x
        gains = flat.reshape(problem.shape)
        sigma = propagate_covariance(dyn, gains, sigma0)
        c = problem.residual(sigma)
        terminal = float(np.linalg.norm(c))
        multiplier = matrix_kit.symmetrize(multiplier + penalty * c)
        stationarity = problem.stationarity(gains, sigma, multiplier)
        logger.debug(
            "outer %d: terminal %.3e stationarity %.3e penalty %.1e (%s)",
            outer, terminal, stationarity, penalty, result.message,
        )
        if terminal <= options.terminal_target and stationarity <= options.stationarity_tol:
            break
        if terminal <= options.terminal_tol and stationarity <= options.stationarity_tol and terminal > 0.5 * previous:
            # Converged within tolerance and no longer improving
            break
        if terminal > 0.25 * previous:
            penalty = min(penalty * options.penalty_growth, options.penalty_max)
        previous = terminal

    if terminal > options.terminal_tol or stationarity > options.stationarity_tol:
        raise SteeringInfeasible(
            f"covariance steering did not converge after {outer} outer iterations "
            f"(terminal residual {terminal:.3e}, stationarity {stationarity:.3e})",
            residual=terminal,
        )
    # Terminal covariance is reported exactly as requested
    sigma[-1] = target
    return CovarianceSolution(
        gains=gains,
        sigma_path=sigma,
        cost=_covariance_effort(gains, sigma),
        terminal_error=terminal,
        stationarity=stationarity,
        iterations=outer,
    )


def solve_density_steering(dyn, rho0, rhoN, options=None):
    """Gaussian-to-Gaussian steering: mean and covariance solved separately"""
    options = options or SteeringOptions()
    v, mu_path = solve_mean_steering(dyn, rho0.mean, rhoN.mean)
    cov = solve_covariance_steering(dyn, rho0.cov, rhoN.cov, options=options)
    policy = AffinePolicy(
        dynamics=dyn,
        gains=cov.gains,
        feedforward=v,
        mu_path=mu_path,
        sigma_path=cov.sigma_path,
        mean_cost=float(np.sum(v * v)),
        covariance_cost=cov.cost,
        eps_reg=options.eps_reg,
        info={
            "terminal_error": cov.terminal_error,
            "stationarity": cov.stationarity,
            "iterations": cov.iterations,
        },
    )
    logger.info(
        "steering solved in %d outer iterations, cost %.6g (mean %.6g + covariance %.6g)",
        cov.iterations, policy.cost, policy.mean_cost, policy.covariance_cost,
    )
    return policy


def ds_cost(policy):
    """Expected control energy sum_k |v_k|^2 + tr(K_k Sigma_k K_k^T)"""
    total = 0.0
    for k in range(policy.N):
        v = policy.feedforward[k]
        K = policy.gains[k]
        total += float(v @ v) + float(np.trace(K @ policy.sigma_path[k] @ K.T))
    return total
