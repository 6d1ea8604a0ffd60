"""Small dense symmetric linear algebra helpers.

Every matrix-valued quantity in the solvers (boundary covariances, bridge
schedules, kernel covariances, Gramians) goes through these functions, so the
SPD test and the re-symmetrization rule live in one place.
"""
import numpy as np
import scipy.linalg

from utils.errors import DimensionMismatch, NotSPD

# Smallest admissible eigenvalue relative to the largest one
SPD_RTOL = 1e-12


def symmetrize(m):
    m = np.asarray(m, dtype=float)
    return 0.5 * (m + m.T)


def as_sym(m, name="matrix"):
    """Validate a square array and return its symmetric part"""
    m = np.atleast_2d(np.asarray(m, dtype=float))
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionMismatch(f"{name} must be square, got shape {m.shape}", module="matrix_kit")
    if not np.all(np.isfinite(m)):
        raise NotSPD(f"{name} has non-finite entries")
    return symmetrize(m)


def sym_eig(m):
    """Eigenvalues (ascending) and orthonormal eigenvectors of a symmetric matrix"""
    w, v = scipy.linalg.eigh(as_sym(m))
    return w, v


def is_spd(m, rtol=SPD_RTOL):
    try:
        check_spd(m, rtol=rtol)
    except (NotSPD, DimensionMismatch):
        return False
    return True


def check_spd(m, name="matrix", rtol=SPD_RTOL):
    w, v = sym_eig(m)
    if w[-1] <= 0.0 or w[0] <= rtol * w[-1]:
        raise NotSPD(f"{name} is not SPD (eigenvalues in [{w[0]:.3e}, {w[-1]:.3e}])")
    return w, v


def sym_sqrt(m, name="matrix"):
    """Principal square root of an SPD matrix"""
    w, v = check_spd(m, name)
    return symmetrize((v * np.sqrt(w)) @ v.T)


def spd_inverse(m, name="matrix"):
    check_spd(m, name)
    m = as_sym(m)
    factor = scipy.linalg.cho_factor(m, lower=True)
    return symmetrize(scipy.linalg.cho_solve(factor, np.eye(m.shape[0])))


def log_det(m, name="matrix"):
    """ln det of an SPD matrix from the Cholesky diagonal"""
    check_spd(m, name)
    chol = scipy.linalg.cholesky(as_sym(m), lower=True)
    return float(2.0 * np.sum(np.log(np.diag(chol))))


def cholesky_factor(m, name="matrix"):
    """Lower Cholesky factor, used to colour standard normal draws"""
    check_spd(m, name)
    return scipy.linalg.cholesky(as_sym(m), lower=True)
