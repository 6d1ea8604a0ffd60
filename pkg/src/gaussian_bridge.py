"""Closed-form Gaussian discrete-time Schrodinger bridge.

For Gaussian boundaries and the random-walk reference x_{k+1} = x_k + sqrt(eps dt) w_k
the optimal chain has Gaussian kernels and marginals determined by a single
SPD matrix Q0; every Q_k = Q0 - k eps dt I shares its eigenvectors, so the
whole schedule is computed from one eigendecomposition.
"""
import logging
from dataclasses import dataclass, replace

import numpy as np

import matrix_kit
from utils.errors import DegenerateBridge, DimensionMismatch, IndexOutOfRange, InfeasibleBridge, NotSPD
from utils.gaussians import GaussianComponent

logger = logging.getLogger(__name__)

BOUNDARY_RTOL = 1e-6


@dataclass(frozen=True)
class BridgeSchedule:
    n: int
    N: int
    eps: float
    dt: float
    mu0: np.ndarray
    muN: np.ndarray
    sigma0: np.ndarray
    sigmaN: np.ndarray
    Q0: np.ndarray
    P0: np.ndarray
    q_eigvals: np.ndarray
    q_eigvecs: np.ndarray
    s_inv: np.ndarray         # (P0 + Q0)^-1, constant along the bridge
    mu_path: np.ndarray       # (N+1, n)
    sigma_path: np.ndarray    # (N+1, n, n)
    gains: np.ndarray         # (N, n, n)  G_k = I - eps dt Q_k^-1
    offsets: np.ndarray       # (N, n)     kernel mean = G_k x + offset_k
    kernel_covs: np.ndarray   # (N, n, n)  eps dt G_k
    kernel_chols: np.ndarray  # (N, n, n)
    cost: float = float("nan")

    @property
    def T(self):
        return self.N * self.dt

    @property
    def step_noise(self):
        return self.eps * self.dt

    def Q_at(self, k):
        return self.Q0 - k * self.step_noise * np.eye(self.n)

    def Q_inv_at(self, k):
        return _shifted_inverse(self.q_eigvals, self.q_eigvecs, k * self.step_noise)


def _shifted_inverse(w, v, shift):
    return matrix_kit.symmetrize((v / (w - shift)) @ v.T)


def _as_component(rho):
    if not isinstance(rho, GaussianComponent):
        rho = GaussianComponent(*rho)
    return rho


def compute_q0(sigma0, sigmaN, horizon_noise):
    """Q0 for the total reference variance eps*T.

    Raises InfeasibleBridge when the matrix inverted inside the formula is not
    SPD, which happens when the target spreads more than the reference noise
    can carry (scalar case: sigma_N^2 >= sigma_0^2 + eps*T).
    """
    n = sigma0.shape[0]
    e = horizon_noise
    root0 = matrix_kit.sym_sqrt(sigma0, "Sigma_0")
    inner = matrix_kit.symmetrize(root0 @ sigmaN @ root0 + 0.25 * e * e * np.eye(n))
    middle = matrix_kit.symmetrize(sigma0 + 0.5 * e * np.eye(n) - matrix_kit.sym_sqrt(inner, "inner root"))
    try:
        middle_inv = matrix_kit.spd_inverse(middle, "Q0 core")
    except NotSPD as exc:
        raise InfeasibleBridge(
            f"eps*T = {e:.6g} is too small for the requested covariance change ({exc})"
        ) from exc
    return matrix_kit.symmetrize(e * root0 @ middle_inv @ root0)


def solve_gaussian_sb(rho0, rhoN, N, eps, dt=1.0):
    """Gaussian dtSB between rho0 and rhoN over N steps of size dt"""
    rho0 = _as_component(rho0)
    rhoN = _as_component(rhoN)
    if rho0.dim != rhoN.dim:
        raise DimensionMismatch(f"boundary dimensions differ: {rho0.dim} vs {rhoN.dim}", module=__name__)
    N = int(N)
    if N < 1:
        raise IndexOutOfRange(f"horizon must be at least 1 step, got {N}", module=__name__)
    if eps <= 0.0 or dt <= 0.0:
        raise InfeasibleBridge(f"eps and dt must be positive (eps={eps}, dt={dt})")

    n = rho0.dim
    c = eps * dt
    sigma0, sigmaN = rho0.cov, rhoN.cov
    Q0 = compute_q0(sigma0, sigmaN, c * N)

    w, v = matrix_kit.sym_eig(Q0)
    # Fail fast: every Q_k up to Q_N must stay SPD
    for k in range(N + 1):
        shifted = w - k * c
        if shifted[0] <= matrix_kit.SPD_RTOL * max(shifted[-1], 0.0) or shifted[-1] <= 0.0:
            raise InfeasibleBridge(
                f"Q_{k} loses positive definiteness (min eigenvalue {shifted[0]:.3e})"
            )
    logger.debug("Q0 eigenvalues %s, eps*T = %.6g", w, c * N)

    q0_inv = _shifted_inverse(w, v, 0.0)
    s_inv = matrix_kit.symmetrize(q0_inv - q0_inv @ sigma0 @ q0_inv)
    try:
        P0 = matrix_kit.symmetrize(np.linalg.inv(matrix_kit.spd_inverse(sigma0) - q0_inv))
    except np.linalg.LinAlgError as exc:
        raise DegenerateBridge(f"Sigma_0^-1 - Q0^-1 is singular: {exc}") from exc

    ks = np.arange(N + 1)
    frac = (ks / N)[:, None]
    mu_path = (1.0 - frac) * rho0.mean + frac * rhoN.mean

    eye = np.eye(n)
    sigma_path = np.empty((N + 1, n, n))
    for k in range(N + 1):
        Qk = Q0 - k * c * eye
        sigma_path[k] = matrix_kit.symmetrize(Qk - Qk @ s_inv @ Qk)
        if not matrix_kit.is_spd(sigma_path[k]):
            raise InfeasibleBridge(f"marginal covariance Sigma_{k} is not SPD")

    err = np.linalg.norm(sigma_path[N] - sigmaN) / np.linalg.norm(sigmaN)
    if err > BOUNDARY_RTOL:
        raise DegenerateBridge(f"terminal covariance reproduced with relative error {err:.3e}")
    # Boundaries are reported exactly as given
    sigma_path[0] = sigma0
    sigma_path[N] = sigmaN

    gains = np.empty((N, n, n))
    offsets = np.empty((N, n))
    kernel_covs = np.empty((N, n, n))
    kernel_chols = np.empty((N, n, n))
    for k in range(N):
        G = matrix_kit.symmetrize(eye - c * _shifted_inverse(w, v, k * c))
        gains[k] = G
        offsets[k] = mu_path[k + 1] - G @ mu_path[k]
        kernel_covs[k] = matrix_kit.symmetrize(c * G)
        kernel_chols[k] = matrix_kit.cholesky_factor(kernel_covs[k], f"kernel covariance {k}")

    sched = BridgeSchedule(
        n=n, N=N, eps=float(eps), dt=float(dt),
        mu0=rho0.mean, muN=rhoN.mean, sigma0=sigma0, sigmaN=sigmaN,
        Q0=Q0, P0=P0, q_eigvals=w, q_eigvecs=v, s_inv=s_inv,
        mu_path=mu_path, sigma_path=sigma_path,
        gains=gains, offsets=offsets, kernel_covs=kernel_covs, kernel_chols=kernel_chols,
    )
    return replace(sched, cost=sb_cost(sched))


def sb_cost(sched):
    """Closed-form KL divergence of the bridge from the reference chain"""
    n = sched.n
    e = sched.step_noise * sched.N
    q0_inv = sched.Q_inv_at(0)
    contraction = np.eye(n) - e * q0_inv
    V = matrix_kit.symmetrize(sched.sigmaN - contraction @ sched.sigma0 @ contraction)
    try:
        logdet_v = matrix_kit.log_det(V, "V")
    except NotSPD as exc:
        raise DegenerateBridge(f"cost matrix V is not SPD ({exc})") from exc
    shift = sched.muN - sched.mu0
    return 0.5 * (
        2.0 * np.trace(sched.sigma0 @ q0_inv)
        - logdet_v
        + n * np.log(e)
        - n
        + float(shift @ shift) / e
        + np.trace(sched.sigmaN - sched.sigma0) / e
    )


def expected_step_kl(sched):
    """Per-step expected KL between bridge kernel and reference kernel.

    Each term is evaluated in closed form under the bridge marginal at step k;
    their sum equals sb_cost.
    """
    n, c = sched.n, sched.step_noise
    terms = np.empty(sched.N)
    for k in range(sched.N):
        H = c * sched.Q_inv_at(k)
        S = sched.kernel_covs[k]
        delta = sched.mu_path[k + 1] - sched.mu_path[k]
        spread = np.trace(H @ sched.sigma_path[k] @ H)
        terms[k] = 0.5 * (
            np.trace(S) / c - n + n * np.log(c) - matrix_kit.log_det(S)
            + (float(delta @ delta) + spread) / c
        )
    return terms


def _check_step(sched, k, upper):
    if not 0 <= k <= upper:
        raise IndexOutOfRange(f"step {k} outside [0, {upper}]", module=__name__)


def kernel_at(sched, k, x):
    """Transition kernel p(x_{k+1} | x_k = x)"""
    _check_step(sched, k, sched.N - 1)
    x = np.asarray(x, dtype=float)
    return GaussianComponent(sched.gains[k] @ x + sched.offsets[k], sched.kernel_covs[k])


def kernel_means(sched, k, X):
    """Kernel means for a batch of states, shape (M, n)"""
    return X @ sched.gains[k] + sched.offsets[k]


def marginal_at(sched, k):
    _check_step(sched, k, sched.N)
    return GaussianComponent(sched.mu_path[k], sched.sigma_path[k])


def q_at_time(sched, t):
    return sched.Q0 - t * sched.eps * np.eye(sched.n)


def marginal_at_time(sched, t):
    """Marginal of the continuous-time bridge sharing this schedule's Q0"""
    T = sched.T
    if not 0.0 <= t <= T:
        raise IndexOutOfRange(f"time {t} outside [0, {T}]", module=__name__)
    Qt = q_at_time(sched, t)
    mean = (1.0 - t / T) * sched.mu0 + (t / T) * sched.muN
    return GaussianComponent(mean, matrix_kit.symmetrize(Qt - Qt @ sched.s_inv @ Qt))


def drift_at_time(sched, t, x):
    """Continuous-time drift (mu_N - mu_0)/T - eps Q_t^-1 (x - mu_t)"""
    T = sched.T
    mean = (1.0 - t / T) * sched.mu0 + (t / T) * sched.muN
    qt_inv = _shifted_inverse(sched.q_eigvals, sched.q_eigvecs, t * sched.eps)
    return (sched.muN - sched.mu0) / T - sched.eps * qt_inv @ (np.asarray(x, dtype=float) - mean)


def step_drift(sched, k, x):
    """Expected increment per unit time of the discrete kernel at step k"""
    _check_step(sched, k, sched.N - 1)
    x = np.asarray(x, dtype=float)
    return (sched.gains[k] @ x + sched.offsets[k] - x) / sched.dt
