"""Monte-Carlo rollouts of mixture policies and the estimators built on them.

Random numbers come from counter-based Philox streams keyed by
(seed, stream, step), so a batch is reproducible bit for bit and two schemes
run with the same seed share their initial states and step noise.
"""
import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

import gaussian_bridge
import matrix_kit
import mixture_policy
from utils.errors import IndexOutOfRange, MissingControls, ModeMismatch, SchemeMismatch
from utils.gaussians import LOG_2PI, gaussian_logpdf

logger = logging.getLogger(__name__)

PER_STEP = "per-step"
ONCE = "once"
REFERENCE = "reference"
SCHEMES = (PER_STEP, ONCE)

# Stream ids
_INITIAL = 0
_SELECT = 1
_NOISE = 2
_COMMIT = 3


def _stream(seed, stream, step=0):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), stream, step])))


@dataclass(frozen=True)
class TrajectoryBatch:
    scheme: str
    mode: str
    seed: int
    states: np.ndarray            # (M, N+1, n)
    controls: np.ndarray = None   # (M, N, m), density steering only
    pairs: np.ndarray = None      # (M, N, 2) per-step, (M, 2) once
    initial_components: np.ndarray = None

    @property
    def M(self):
        return self.states.shape[0]

    @property
    def N(self):
        return self.states.shape[1] - 1


@dataclass(frozen=True)
class KlEstimate:
    value: float
    std_error: float
    M: int


@dataclass(frozen=True)
class EmpiricalMarginal:
    k: int
    mean: np.ndarray
    covariance: np.ndarray
    histogram: np.ndarray  # (N1, N2) assignment frequencies


@dataclass(frozen=True)
class SchemeComparison:
    per_step: KlEstimate
    once: KlEstimate
    difference: float
    difference_se: float


def _summarize(terms):
    terms = np.asarray(terms, dtype=float)
    M = terms.size
    se = float(np.std(terms, ddof=1) / np.sqrt(M)) if M > 1 else float("nan")
    return KlEstimate(value=float(np.mean(terms)), std_error=se, M=M)


def _initial_states(rho0, M, seed):
    rng = _stream(seed, _INITIAL)
    u = rng.random(M)
    cdf = np.cumsum(rho0.weights)
    comps = np.minimum(np.searchsorted(cdf, u * cdf[-1], side="right"), len(rho0) - 1)
    z = rng.standard_normal((M, rho0.dim))
    x0 = np.empty((M, rho0.dim))
    for i, comp in enumerate(rho0.components):
        rows = comps == i
        x0[rows] = comp.mean + z[rows] @ matrix_kit.cholesky_factor(comp.cov).T
    return x0, comps


def rollout(mb, scheme, M, seed):
    """Simulate M paths of the mixture policy under the given scheme"""
    if scheme not in SCHEMES:
        raise SchemeMismatch(f"unknown scheme {scheme!r}, expected one of {SCHEMES}")
    M = int(M)
    if M < 1:
        raise IndexOutOfRange(f"path count must be positive, got {M}", module=__name__)
    n1, n2 = mb.shape
    x, comps = _initial_states(mb.rho0, M, seed)
    states = np.empty((M, mb.N + 1, mb.n))
    states[:, 0] = x
    controls = None if mb.mode == mixture_policy.SB else np.empty((M, mb.N, mb.dynamics.m))

    if scheme == ONCE:
        positions = mixture_policy.commit_pairs(mb, comps, _stream(seed, _COMMIT).random(M))
        chosen = np.array([mb.pair_index(mb.active[p]) for p in positions]).reshape(M, 2)
    else:
        chosen = np.empty((M, mb.N, 2), dtype=int)

    for k in range(mb.N):
        if scheme == PER_STEP:
            probs = mixture_policy.responsibility_batch(mb, k, x)
            positions = mixture_policy.choose_pairs(probs, _stream(seed, _SELECT, k).random(M))
            flat = mb.active[positions]
            chosen[:, k, 0], chosen[:, k, 1] = np.divmod(flat, n2)
        normals = _stream(seed, _NOISE, k).standard_normal((M, mb.noise_dim))
        x, u = mixture_policy.advance(mb, k, x, positions, normals)
        states[:, k + 1] = x
        if controls is not None:
            controls[:, k] = u
        logger.debug("rollout %s: step %d/%d", scheme, k + 1, mb.N)

    return TrajectoryBatch(
        scheme=scheme, mode=mb.mode, seed=int(seed), states=states,
        controls=controls, pairs=chosen, initial_components=comps,
    )


def rollout_reference(rho0, N, eps, dt, M, seed):
    """Paths of the reference random walk x_{k+1} = x_k + sqrt(eps dt) w_k"""
    x, comps = _initial_states(rho0, M, seed)
    states = np.empty((M, N + 1, rho0.dim))
    states[:, 0] = x
    scale = np.sqrt(eps * dt)
    for k in range(N):
        x = x + scale * _stream(seed, _NOISE, k).standard_normal((M, rho0.dim))
        states[:, k + 1] = x
    return TrajectoryBatch(scheme=REFERENCE, mode=mixture_policy.SB, seed=int(seed), states=states,
                           initial_components=comps)


def _reference_log_kernels(states, eps, dt):
    """(M,) sum over steps of log N(x_{k+1}; x_k, eps dt I)"""
    steps = np.diff(states, axis=1)
    n = states.shape[2]
    c = eps * dt
    return np.sum(-0.5 * np.sum(steps * steps, axis=2) / c - 0.5 * n * (LOG_2PI + np.log(c)), axis=1)


def _pair_log_kernels(mb, k, X, Y):
    """(M, P) log p^ij(y | x) at step k for every active pair"""
    out = np.empty((X.shape[0], mb.active.size))
    for pos, p in enumerate(mb.active):
        sched = mb.pair(p)
        out[:, pos] = gaussian_logpdf(Y, gaussian_bridge.kernel_means(sched, k, X), chol=sched.kernel_chols[k])
    return out


def path_log_ratios(batch, mb):
    """Per-path log density ratio of the simulated process against the reference"""
    if mb.mode != mixture_policy.SB:
        raise ModeMismatch("path KL is defined against the random-walk reference in bridge mode")
    states = batch.states
    ref = _reference_log_kernels(states, mb.eps, mb.dt)
    if batch.scheme == REFERENCE:
        return ref - ref
    if batch.scheme == PER_STEP:
        total = np.zeros(batch.M)
        for k in range(mb.N):
            weighted = mixture_policy.pair_log_densities(mb, k, states[:, k]) + mb.log_lam
            log_gamma = weighted - logsumexp(weighted, axis=1, keepdims=True)
            total += logsumexp(log_gamma + _pair_log_kernels(mb, k, states[:, k], states[:, k + 1]), axis=1)
        return total - ref
    if batch.scheme == ONCE:
        x0 = states[:, 0]
        acc = mixture_policy.pair_log_densities(mb, 0, x0) + mb.log_lam
        for k in range(mb.N):
            acc += _pair_log_kernels(mb, k, states[:, k], states[:, k + 1])
        return logsumexp(acc, axis=1) - mb.rho0.logpdf(x0) - ref
    raise SchemeMismatch(f"unknown scheme {batch.scheme!r}")


def estimate_path_kl(batch, mb, scheme=None):
    """KL of the batch's process against the random walk, with q0 = p0"""
    if scheme is not None and scheme != batch.scheme:
        raise SchemeMismatch(f"batch was generated with {batch.scheme!r}, not {scheme!r}")
    if batch.N != mb.N:
        raise SchemeMismatch(f"batch has {batch.N} steps, mixture has {mb.N}")
    return _summarize(path_log_ratios(batch, mb))


def estimate_control_cost(batch):
    """Mean and standard error of sum_k |u_k|^2 over paths"""
    if batch.controls is None:
        raise MissingControls("batch carries no controls (bridge mode or reference)")
    return _summarize(np.sum(batch.controls * batch.controls, axis=(1, 2)))


def empirical_marginal(batch, k, mb=None):
    if not 0 <= k <= batch.N:
        raise IndexOutOfRange(f"step {k} outside [0, {batch.N}]", module=__name__)
    X = batch.states[:, k]
    mean = X.mean(axis=0)
    cov = np.atleast_2d(np.cov(X, rowvar=False))
    histogram = None
    if mb is not None:
        best = np.argmax(mixture_policy.pair_log_densities(mb, k, X) + mb.log_lam, axis=1)
        counts = np.bincount(mb.active[best], minlength=mb.shape[0] * mb.shape[1])
        histogram = counts.reshape(mb.shape) / X.shape[0]
    return EmpiricalMarginal(k=k, mean=mean, covariance=cov, histogram=histogram)


def compare_schemes(mb, M, seed):
    """Paired per-step vs randomize-once path KL under common random numbers"""
    markov = rollout(mb, PER_STEP, M, seed)
    once = rollout(mb, ONCE, M, seed)
    lp = path_log_ratios(markov, mb)
    lr = path_log_ratios(once, mb)
    diff = _summarize(lp - lr)
    logger.info("per-step KL %.6g, once KL %.6g, paired difference %.3g +- %.3g",
                lp.mean(), lr.mean(), diff.value, diff.std_error)
    return SchemeComparison(
        per_step=_summarize(lp), once=_summarize(lr), difference=diff.value, difference_se=diff.std_error
    )


@dataclass(frozen=True)
class LimitRow:
    dt: float
    steps: int
    k: int
    drift_err: float
    diff_err: float
    gen_err: float
    ratio: float


def _default_probe(rho0, rhoN, eps, T, t_probe, seed):
    """One draw from the continuous mixture marginal at t_probe"""
    mb = mixture_policy.build_mixture_bridge(rho0, rhoN, mixture_policy.SB, 1, eps, T)
    rng = np.random.default_rng(seed)
    weights = mb.plan.lam.ravel()[mb.active]
    pos = rng.choice(mb.active.size, p=weights / weights.sum())
    return gaussian_bridge.marginal_at_time(mb.pair(mb.active[pos]), t_probe).sample(1, rng)[0]


def limit_check(rho0, rhoN, eps, T, dt_list, x_probe=None, t_probe=None, seed=0):
    """Drift, diffusion and generator defects of the discrete mixture chain per dt.

    drift_err compares the responsibility-weighted drift held over the step
    containing t_probe with the continuous drift at that step's midpoint.
    diff_err is the largest |S_k/dt - eps I|_2 over active pairs, which equals
    eps^2 dt |Q_k^-1|_2. gen_err is the defect of the generator applied to
    |x|^2.
    """
    dts = [float(d) for d in dt_list]
    if any(b >= a for a, b in zip(dts, dts[1:])):
        raise IndexOutOfRange(f"dt_list must be strictly decreasing, got {dts}", module=__name__)
    offset = max(float(np.max(np.abs(c.mean))) for c in (*rho0.components, *rhoN.components))
    if offset > 0.0:
        logger.warning(
            "limit check with nonzero boundary means (largest |mean| %.3g): the drift limit is derived "
            "for centred boundaries and is unverified here", offset,
        )
    t_probe = 0.5 * T if t_probe is None else float(t_probe)
    if x_probe is None:
        x_probe = _default_probe(rho0, rhoN, eps, T, t_probe, seed)
    x_probe = np.asarray(x_probe, dtype=float)

    rows = []
    prev = None
    for dt in dts:
        steps = int(round(T / dt))
        if steps < 1 or abs(steps * dt - T) > 1e-9 * T:
            raise IndexOutOfRange(f"T = {T} is not a whole number of steps of {dt}", module=__name__)
        mb = mixture_policy.build_mixture_bridge(rho0, rhoN, mixture_policy.SB, steps, eps, dt)
        k = min(int(np.floor(t_probe / dt + 1e-9)), steps - 1)

        drift = mixture_policy.mixture_step_drift(mb, k, x_probe)
        target = mixture_policy.continuous_drift(mb, (k + 0.5) * dt, x_probe)
        drift_err = float(np.linalg.norm(drift - target))

        eye = np.eye(mb.n)
        gamma = mixture_policy.responsibility_batch(mb, k, x_probe[None, :])[0]
        diff_err = 0.0
        gen = 0.0
        for g, p in zip(gamma, mb.active):
            sched = mb.pair(p)
            diff_err = max(diff_err, float(np.linalg.norm(sched.kernel_covs[k] / dt - eps * eye, 2)))
            b = gaussian_bridge.step_drift(sched, k, x_probe)
            gen += g * (dt * float(b @ b) - eps * eps * dt * float(np.trace(sched.Q_inv_at(k))))
        ratio = prev / drift_err if prev is not None and drift_err > 0.0 else float("nan")
        rows.append(LimitRow(dt=dt, steps=steps, k=k, drift_err=drift_err, diff_err=diff_err,
                             gen_err=abs(gen), ratio=ratio))
        logger.debug("limit check dt=%g: drift %.3e diffusion %.3e generator %.3e", dt, drift_err, diff_err, gen)
        prev = drift_err
    return rows
