"""Mixtures of component-to-component policies.

A MixtureBridge holds one pair solution per (initial component i, terminal
component j) and the transport plan lambda weighting them. Two ways of
running it are supported:

  * per-step: at every step the pair is re-drawn from the responsibilities
    lambda_ij p_k^ij(x) / p_k(x), giving a Markov chain whose marginals are the
    lambda-weighted mixtures of the pair marginals;
  * randomize-once: the pair is drawn at k = 0 and kept for the whole horizon.

All densities are handled in log space. Pairs with lambda_ij = 0 never carry
probability and are dropped from the active set.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

import covariance_steering
import gaussian_bridge
import matrix_kit
from transport_plan import solve_transport
from utils.errors import DegenerateDensity, DimensionMismatch, IndexOutOfRange, ModeMismatch
from utils.gaussians import gaussian_logpdf
from utils.settings import get_worker_count

logger = logging.getLogger(__name__)

SB = "sb"
DS = "ds"


@dataclass(frozen=True)
class Responsibilities:
    k: int
    x: np.ndarray
    gamma: np.ndarray  # (N1, N2)


@dataclass
class MixtureBridge:
    rho0: object
    rhoN: object
    mode: str
    N: int
    eps: float
    dt: float
    pairs: list               # pairs[i][j]: BridgeSchedule (sb) or AffinePolicy (ds)
    costs: np.ndarray         # (N1, N2) pair costs J_ij
    plan: object
    dynamics: object = None
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def shape(self):
        return self.costs.shape

    @property
    def active(self):
        """Flat row-major indices of pairs with positive weight"""
        if "active" not in self._cache:
            flat = self.plan.lam.ravel()
            self._cache["active"] = np.flatnonzero(flat > 0.0)
        return self._cache["active"]

    @property
    def log_lam(self):
        return np.log(self.plan.lam.ravel()[self.active])

    @property
    def n(self):
        return self.rho0.dim

    @property
    def noise_dim(self):
        return self.n if self.mode == SB else self.dynamics.D.shape[2]

    def pair(self, p):
        i, j = divmod(int(p), self.shape[1])
        return self.pairs[i][j]

    def pair_index(self, p):
        return divmod(int(p), self.shape[1])

    def marginal_factors(self, k):
        """Means (P, n), Cholesky factors (P, n, n) of the active pair marginals at step k"""
        key = ("marginal", k)
        if key not in self._cache:
            means, chols = [], []
            for p in self.active:
                sol = self.pair(p)
                cov = sol.sigma_path[k] if self.mode == SB else sol.density_cov(k)
                means.append(sol.mu_path[k])
                chols.append(matrix_kit.cholesky_factor(cov))
            self._cache[key] = (np.array(means), np.array(chols))
        return self._cache[key]


def _solve_pairs(tasks, workers):
    """Run independent solves on a thread pool, keeping submission order"""
    if workers <= 1 or len(tasks) <= 1:
        return [task() for task in tasks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(task) for task in tasks]
        return [f.result() for f in futures]


def _cov_key(rho0, rhoN):
    return rho0.cov.tobytes() + rhoN.cov.tobytes()


def build_mixture_bridge(rho0, rhoN, mode, N, eps, dt=1.0, dynamics=None, options=None, workers=None):
    """Solve every component pair, then the mixing weights"""
    if mode not in (SB, DS):
        raise ModeMismatch(f"unknown mode {mode!r}")
    workers = workers or get_worker_count()
    n1, n2 = len(rho0), len(rhoN)
    cells = [(i, j) for i in range(n1) for j in range(n2)]

    if mode == SB:
        tasks = [
            (lambda i=i, j=j: gaussian_bridge.solve_gaussian_sb(rho0.components[i], rhoN.components[j], N, eps, dt))
            for i, j in cells
        ]
        solved = _solve_pairs(tasks, workers)
    else:
        if dynamics is None:
            raise ModeMismatch("density steering needs dynamics")
        if dynamics.N != N or dynamics.n != rho0.dim:
            raise DimensionMismatch(
                f"dynamics cover {dynamics.N} steps in R^{dynamics.n}, problem needs {N} steps in R^{rho0.dim}",
                module=__name__,
            )
        options = options or covariance_steering.SteeringOptions()
        # Covariance subproblems only depend on the covariance pair
        unique = {}
        for i, j in cells:
            key = _cov_key(rho0.components[i], rhoN.components[j])
            unique.setdefault(key, (rho0.components[i].cov, rhoN.components[j].cov))
        keys = list(unique)
        cov_tasks = [
            (lambda s0=unique[key][0], sN=unique[key][1]:
                covariance_steering.solve_covariance_steering(dynamics, s0, sN, options=options))
            for key in keys
        ]
        cov_solutions = dict(zip(keys, _solve_pairs(cov_tasks, workers)))
        solved = []
        for i, j in cells:
            a, b = rho0.components[i], rhoN.components[j]
            cov = cov_solutions[_cov_key(a, b)]
            v, mu_path = covariance_steering.solve_mean_steering(dynamics, a.mean, b.mean)
            solved.append(covariance_steering.AffinePolicy(
                dynamics=dynamics,
                gains=cov.gains,
                feedforward=v,
                mu_path=mu_path,
                sigma_path=cov.sigma_path,
                mean_cost=float(np.sum(v * v)),
                covariance_cost=cov.cost,
                eps_reg=options.eps_reg,
                info={"terminal_error": cov.terminal_error, "stationarity": cov.stationarity},
            ))

    pairs = [[solved[i * n2 + j] for j in range(n2)] for i in range(n1)]
    costs = np.array([[pairs[i][j].cost for j in range(n2)] for i in range(n1)])
    plan = solve_transport(costs, rho0.weights, rhoN.weights)
    logger.info("%s mixture: %dx%d pairs, plan objective %.6g", mode, n1, n2, plan.objective)
    return MixtureBridge(
        rho0=rho0, rhoN=rhoN, mode=mode, N=int(N), eps=float(eps), dt=float(dt),
        pairs=pairs, costs=costs, plan=plan, dynamics=dynamics,
    )


def _check_step(mb, k, upper):
    if not 0 <= k <= upper:
        raise IndexOutOfRange(f"step {k} outside [0, {upper}]", module=__name__)


def pair_log_densities(mb, k, X):
    """(M, P) log densities of the active pair marginals at step k"""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    means, chols = mb.marginal_factors(k)
    return np.stack([gaussian_logpdf(X, m, chol=L) for m, L in zip(means, chols)], axis=1)


def mixture_marginal_logpdf(mb, k, X):
    _check_step(mb, k, mb.N)
    return logsumexp(pair_log_densities(mb, k, X) + mb.log_lam, axis=1)


def mixture_marginal_pdf(mb, k, x):
    """Density of sum_ij lambda_ij p_k^ij at x"""
    single = np.asarray(x).ndim == 1
    out = np.exp(mixture_marginal_logpdf(mb, k, x))
    return float(out[0]) if single else out


def mixture_gmm_moments(mb, k):
    """Mean and covariance of the step-k mixture marginal"""
    means, _ = mb.marginal_factors(k)
    weights = mb.plan.lam.ravel()[mb.active]
    covs = []
    for p in mb.active:
        sol = mb.pair(p)
        covs.append(sol.sigma_path[k])
    mean = weights @ means
    cov = np.zeros((mb.n, mb.n))
    for w, m, c in zip(weights, means, covs):
        d = m - mean
        cov += w * (c + np.outer(d, d))
    return mean, matrix_kit.symmetrize(cov)


def responsibility_batch(mb, k, X):
    """(M, P) probabilities over active pairs for each row of X"""
    _check_step(mb, k, mb.N)
    weighted = pair_log_densities(mb, k, X) + mb.log_lam
    norm = logsumexp(weighted, axis=1, keepdims=True)
    if not np.all(np.isfinite(norm)):
        raise DegenerateDensity(f"mixture density underflows at step {k}")
    return np.exp(weighted - norm)


def responsibilities(mb, k, x):
    x = np.asarray(x, dtype=float)
    gamma = np.zeros(mb.shape[0] * mb.shape[1])
    gamma[mb.active] = responsibility_batch(mb, k, x[None, :])[0]
    return Responsibilities(k=k, x=x, gamma=gamma.reshape(mb.shape))


def choose_pairs(probs, uniforms):
    """Inverse-CDF draw of one active-pair position per row"""
    cdf = np.cumsum(probs, axis=1)
    pos = np.sum(cdf <= np.asarray(uniforms)[:, None] * cdf[:, -1:], axis=1)
    return np.minimum(pos, probs.shape[1] - 1)


def advance(mb, k, X, positions, normals):
    """Move each row of X one step with the pair at its active position.

    normals has shape (M, noise_dim). Returns (next_X, controls) where controls
    is None in Schrodinger bridge mode.
    """
    X = np.atleast_2d(X)
    out = np.empty_like(X)
    controls = None if mb.mode == SB else np.empty((X.shape[0], mb.dynamics.m))
    for pos in np.unique(positions):
        rows = positions == pos
        sol = mb.pair(mb.active[pos])
        if mb.mode == SB:
            out[rows] = (
                gaussian_bridge.kernel_means(sol, k, X[rows]) + normals[rows] @ sol.kernel_chols[k].T
            )
        else:
            dyn = mb.dynamics
            u = sol.control(k, X[rows])
            controls[rows] = u
            out[rows] = X[rows] @ dyn.A[k].T + u @ dyn.B[k].T + normals[rows] @ dyn.D[k].T
    return out, controls


def step_markov(mb, k, x, rng):
    """One step of the per-step randomized policy from a single state"""
    _check_step(mb, k, mb.N - 1)
    x = np.asarray(x, dtype=float)
    probs = responsibility_batch(mb, k, x[None, :])
    pos = choose_pairs(probs, np.array([rng.random()]))
    normals = rng.standard_normal((1, mb.noise_dim))
    nxt, u = advance(mb, k, x[None, :], pos, normals)
    return nxt[0], mb.pair_index(mb.active[pos[0]]), None if u is None else u[0]


def step_randomize_once(mb, committed_pair, k, x, rng):
    """One step under a pair committed at the start of the horizon"""
    _check_step(mb, k, mb.N - 1)
    i, j = committed_pair
    flat = i * mb.shape[1] + j
    where = np.flatnonzero(mb.active == flat)
    if where.size == 0:
        raise IndexOutOfRange(f"pair {committed_pair} has zero weight", module=__name__)
    x = np.asarray(x, dtype=float)
    normals = rng.standard_normal((1, mb.noise_dim))
    nxt, _ = advance(mb, k, x[None, :], where, normals)
    return nxt[0]


def commit_pairs(mb, components, uniforms):
    """Active positions committed given the initial component of each path.

    j is drawn with probability lambda_ij / alpha_i so the path law is
    sum_ij lambda_ij p^ij.
    """
    lam = mb.plan.lam
    n2 = mb.shape[1]
    lookup = {int(p): pos for pos, p in enumerate(mb.active)}
    out = np.empty(len(components), dtype=int)
    for i in np.unique(components):
        rows = components == i
        cond = lam[i] / lam[i].sum()
        cdf = np.cumsum(cond)
        j = np.minimum(np.searchsorted(cdf, uniforms[rows] * cdf[-1], side="right"), n2 - 1)
        # Skip zero-weight columns that the search can land on through rounding
        for jj in np.unique(j):
            if lam[i, jj] <= 0.0:
                j[j == jj] = int(np.flatnonzero(lam[i] > 0.0)[-1])
        out[rows] = [lookup[int(i) * n2 + int(jj)] for jj in j]
    return out


def sb_upper_bound(mb):
    """sum_ij lambda_ij J^SB_ij, an upper bound on the path KL of the per-step chain"""
    if mb.mode != SB:
        raise ModeMismatch("sb_upper_bound needs a Schrodinger bridge mixture")
    return float(np.sum(mb.plan.lam * mb.costs))


def ds_total_cost(mb):
    """sum_ij lambda_ij J^DS_ij, the exact expected control energy of the mixture"""
    if mb.mode != DS:
        raise ModeMismatch("ds_total_cost needs a density steering mixture")
    return float(np.sum(mb.plan.lam * mb.costs))


def mixture_step_drift(mb, k, x):
    """Responsibility-weighted kernel drift at step k (bridge mode)"""
    if mb.mode != SB:
        raise ModeMismatch("drift diagnostics need a Schrodinger bridge mixture")
    x = np.asarray(x, dtype=float)
    gamma = responsibility_batch(mb, k, x[None, :])[0]
    drifts = np.array([gaussian_bridge.step_drift(mb.pair(p), k, x) for p in mb.active])
    return gamma @ drifts


def continuous_responsibilities(mb, t, x):
    """Responsibilities under the continuous-time pair marginals at time t"""
    x = np.asarray(x, dtype=float)
    logs = np.array([
        gaussian_bridge.marginal_at_time(mb.pair(p), t).logpdf(x) for p in mb.active
    ]) + mb.log_lam
    return np.exp(logs - logsumexp(logs))


def continuous_drift(mb, t, x):
    if mb.mode != SB:
        raise ModeMismatch("drift diagnostics need a Schrodinger bridge mixture")
    phi = continuous_responsibilities(mb, t, x)
    drifts = np.array([gaussian_bridge.drift_at_time(mb.pair(p), t, x) for p in mb.active])
    return phi @ drifts
