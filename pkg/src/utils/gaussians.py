from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.special import logsumexp

import matrix_kit
from utils.errors import BadMarginals, DimensionMismatch

LOG_2PI = np.log(2.0 * np.pi)
SIMPLEX_TOL = 1e-12


@dataclass(frozen=True)
class GaussianComponent:
    """One Gaussian: mean vector and SPD covariance"""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = matrix_kit.as_sym(self.cov, "covariance")
        if cov.shape != (mean.size, mean.size):
            raise DimensionMismatch(
                f"mean has length {mean.size} but covariance is {cov.shape}", module="gaussians"
            )
        matrix_kit.check_spd(cov, "covariance")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self):
        return self.mean.size

    def logpdf(self, x):
        return gaussian_logpdf(x, self.mean, self.cov)

    def pdf(self, x):
        return np.exp(self.logpdf(x))

    def sample(self, size, rng):
        z = rng.standard_normal((size, self.dim))
        return self.mean + z @ matrix_kit.cholesky_factor(self.cov).T


def gaussian_logpdf(x, mean, cov=None, chol=None):
    """Log density of N(mean, cov) at the rows of x.

    mean may be a single vector or one mean per row of x. Pass a precomputed
    lower Cholesky factor through chol to skip the factorization.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if chol is None:
        chol = matrix_kit.cholesky_factor(cov)
    diff = x - np.asarray(mean, dtype=float)
    z = scipy.linalg.solve_triangular(chol, diff.T, lower=True)
    n = x.shape[1]
    out = -0.5 * np.sum(z * z, axis=0) - np.sum(np.log(np.diag(chol))) - 0.5 * n * LOG_2PI
    return out[0] if single else out


def check_simplex(weights, name="weights", tol=SIMPLEX_TOL):
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or w.size == 0:
        raise BadMarginals(f"{name} must be a non-empty vector")
    if np.any(w <= 0.0):
        raise BadMarginals(f"{name} must be entrywise positive, got {w}")
    if abs(w.sum() - 1.0) > tol:
        raise BadMarginals(f"{name} must sum to 1, got {w.sum():.15g}")
    return w


class Gmm:
    """Weighted list of GaussianComponents with weights on the simplex"""

    def __init__(self, weights, components, tol=SIMPLEX_TOL):
        self.components = list(components)
        self.weights = check_simplex(weights, tol=tol)
        if len(self.components) != self.weights.size:
            raise DimensionMismatch(
                f"{self.weights.size} weights for {len(self.components)} components", module="gaussians"
            )
        dims = {c.dim for c in self.components}
        if len(dims) != 1:
            raise DimensionMismatch(f"components have mixed dimensions {sorted(dims)}", module="gaussians")
        self.log_weights = np.log(self.weights)

    @classmethod
    def from_arrays(cls, weights, means, covs):
        return cls(weights, [GaussianComponent(m, c) for m, c in zip(means, covs)])

    @property
    def dim(self):
        return self.components[0].dim

    def __len__(self):
        return len(self.components)

    def component_logpdf(self, x):
        """(M, K) matrix of per-component log densities"""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.stack([c.logpdf(x) for c in self.components], axis=1)

    def logpdf(self, x):
        single = np.asarray(x).ndim == 1
        out = logsumexp(self.component_logpdf(x) + self.log_weights, axis=1)
        return out[0] if single else out

    def pdf(self, x):
        return np.exp(self.logpdf(x))

    def mean(self):
        return np.sum([w * c.mean for w, c in zip(self.weights, self.components)], axis=0)

    def covariance(self):
        mu = self.mean()
        cov = np.zeros((self.dim, self.dim))
        for w, c in zip(self.weights, self.components):
            d = c.mean - mu
            cov += w * (c.cov + np.outer(d, d))
        return matrix_kit.symmetrize(cov)

    def assign(self, x):
        """Index of the most likely weighted component for each row of x"""
        return np.argmax(self.component_logpdf(x) + self.log_weights, axis=1)

    def sample(self, size, rng):
        idx = rng.choice(len(self), size=size, p=self.weights)
        x = np.empty((size, self.dim))
        for k, comp in enumerate(self.components):
            mask = idx == k
            if np.any(mask):
                x[mask] = comp.sample(int(mask.sum()), rng)
        return x, idx
