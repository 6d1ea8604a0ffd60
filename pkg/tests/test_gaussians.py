import numpy as np
import pytest
from scipy.stats import multivariate_normal

from utils.errors import BadMarginals, DimensionMismatch, NotSPD
from utils.gaussians import GaussianComponent, Gmm, gaussian_logpdf


def test_logpdf_matches_scipy(rng):
    mean = np.array([1.0, -1.0])
    cov = np.array([[0.5, 0.1], [0.1, 0.3]])
    X = rng.normal(size=(20, 2))
    np.testing.assert_allclose(gaussian_logpdf(X, mean, cov), multivariate_normal(mean, cov).logpdf(X), rtol=1e-12)
    assert GaussianComponent(mean, cov).logpdf(X[0]) == pytest.approx(multivariate_normal(mean, cov).logpdf(X[0]))


def test_gmm_density_and_moments(rng):
    gmm = Gmm.from_arrays([0.3, 0.7], [[0.0, 0.0], [3.0, 1.0]], [np.eye(2), 0.5 * np.eye(2)])
    x = np.array([1.0, 0.5])
    expected = 0.3 * multivariate_normal([0.0, 0.0], np.eye(2)).pdf(x) + 0.7 * multivariate_normal(
        [3.0, 1.0], 0.5 * np.eye(2)
    ).pdf(x)
    assert gmm.pdf(x) == pytest.approx(expected, rel=1e-12)

    samples, idx = gmm.sample(40000, rng)
    assert np.mean(idx == 1) == pytest.approx(0.7, abs=0.01)
    np.testing.assert_allclose(samples.mean(axis=0), gmm.mean(), atol=0.03)
    np.testing.assert_allclose(np.cov(samples, rowvar=False), gmm.covariance(), atol=0.06)
    assert np.all(gmm.assign(np.array([[0.0, 0.0], [3.0, 1.0]])) == [0, 1])


def test_validation():
    with pytest.raises(NotSPD):
        GaussianComponent([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(DimensionMismatch):
        GaussianComponent([0.0, 0.0], np.eye(3))
    with pytest.raises(BadMarginals):
        Gmm.from_arrays([0.5, 0.6], [[0.0], [1.0]], [[[1.0]], [[1.0]]])
    with pytest.raises(DimensionMismatch):
        Gmm([1.0], [GaussianComponent([0.0], [[1.0]]), GaussianComponent([1.0], [[1.0]])])
