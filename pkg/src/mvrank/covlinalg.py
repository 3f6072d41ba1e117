"""Dense K-by-K covariance algebra.

Covariances are parameterized through a free square factor L with
``sigma = L @ L.T``, which keeps every matrix symmetric PSD by construction.
All determinant/inverse work goes through a Cholesky factorization; a small
jitter is added only when the plain factorization fails, so well-conditioned
inputs are handled exactly.
"""

import csv

import numpy as np
from numpy.typing import NDArray

from .errors import DegenerateCovarianceError, InvalidInputError

# Relative jitter applied when a Cholesky factorization fails outright.
JITTER_SCALE = 1e-8


def _as_square(mat, name: str) -> NDArray:
    arr = np.asarray(mat, dtype=float)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise InvalidInputError(f"{name} must be a square matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return arr


def make_covariance(factor) -> NDArray:
    """Build ``sigma = L @ L.T`` from a free square factor L."""
    L = _as_square(factor, "covariance factor")
    sigma = L @ L.T
    return 0.5 * (sigma + sigma.T)


def compose_pair_covariance(sigma_u, sigma_i, lam: float) -> NDArray:
    """Convex combination ``lam * sigma_u + (1 - lam) * sigma_i``."""
    su = _as_square(sigma_u, "user covariance")
    si = _as_square(sigma_i, "item covariance")
    if su.shape != si.shape:
        raise InvalidInputError(f"dimension mismatch: {su.shape} vs {si.shape}")
    if not 0.0 <= lam <= 1.0:
        raise InvalidInputError(f"mixing weight must lie in [0, 1], got {lam}")
    return lam * su + (1.0 - lam) * si


def compose_triple_covariance(sigma_u, sigma_i, sigma_j, lam: float) -> NDArray:
    """Covariance of an observed difference vector: ``2*lam*Su + (1-lam)*(Si + Sj)``."""
    su = _as_square(sigma_u, "user covariance")
    si = _as_square(sigma_i, "item covariance")
    sj = _as_square(sigma_j, "item covariance")
    if not (su.shape == si.shape == sj.shape):
        raise InvalidInputError("dimension mismatch among covariance terms")
    if not 0.0 <= lam <= 1.0:
        raise InvalidInputError(f"mixing weight must lie in [0, 1], got {lam}")
    return 2.0 * lam * su + (1.0 - lam) * (si + sj)


def variance_vector(sigma) -> NDArray:
    """Diagonal of a covariance matrix; requires strictly positive variances."""
    s = _as_square(sigma, "covariance")
    diag = np.diag(s).copy()
    if np.any(diag <= 0.0):
        raise DegenerateCovarianceError(f"nonpositive variance on the diagonal: {diag}")
    return diag


def correlation_from_covariance(sigma) -> NDArray:
    """Correlation matrix ``rho[a,b] = sigma[a,b] / (sd_a * sd_b)`` with unit diagonal."""
    s = _as_square(sigma, "covariance")
    sd = np.sqrt(variance_vector(s))
    rho = s / np.outer(sd, sd)
    np.fill_diagonal(rho, 1.0)
    return 0.5 * (rho + rho.T)


def cholesky_spd(sigma) -> NDArray:
    """Lower Cholesky factor, retrying once with a trace-scaled jitter.

    The jitter keeps mid-training near-singular matrices usable without
    perturbing well-conditioned inputs at all.
    """
    s = _as_square(sigma, "covariance")
    try:
        return np.linalg.cholesky(s)
    except np.linalg.LinAlgError:
        k = s.shape[0]
        eps = JITTER_SCALE * max(1.0, float(np.trace(s)) / k)
        try:
            return np.linalg.cholesky(s + eps * np.eye(k))
        except np.linalg.LinAlgError as exc:
            raise DegenerateCovarianceError("covariance singular after jitter") from exc


def log_det(sigma) -> float:
    """``ln|sigma|`` via the Cholesky factor (never cofactor expansion)."""
    chol = cholesky_spd(sigma)
    return float(2.0 * np.sum(np.log(np.diag(chol))))


def inverse_spd(sigma) -> NDArray:
    """Inverse of an SPD matrix through its Cholesky factor."""
    chol = cholesky_spd(sigma)
    k = chol.shape[0]
    inv = np.linalg.solve(chol.T, np.linalg.solve(chol, np.eye(k)))
    return 0.5 * (inv + inv.T)


def gaussian_total_correlation(rho) -> float:
    """Total correlation of a Gaussian vector with correlation matrix rho.

    Equals ``-0.5 * ln|rho|``; zero iff the variables are uncorrelated.
    """
    value = -0.5 * log_det(rho)
    # |rho| <= 1 for a valid correlation matrix, so the value is >= 0 up to roundoff.
    return float(value)


def theorem1_gap(sigma) -> tuple[float, float]:
    """Total correlation vs its determinant-based bound, from one consistent path.

    Returns ``(lhs, rhs)`` with ``lhs = -0.5 ln|rho|`` and
    ``rhs = -0.5 ln|sigma| + 0.5 * sum_k ln(var_k)``. The exact identity
    ``|sigma| = |rho| * prod_k var_k`` makes the two sides agree to roundoff;
    callers assert ``lhs >= rhs - 1e-10``.
    """
    s = _as_square(sigma, "covariance")
    var = variance_vector(s)
    rho = correlation_from_covariance(s)
    lhs = gaussian_total_correlation(rho)
    rhs = -0.5 * log_det(s) + 0.5 * float(np.sum(np.log(var)))
    return lhs, rhs


def write_matrix_csv(path, matrix, aspect_names) -> None:
    """Dump a K-by-K matrix row-major with aspect names as the header."""
    mat = _as_square(matrix, "matrix")
    if len(aspect_names) != mat.shape[0]:
        raise InvalidInputError("aspect name count does not match matrix dimension")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(aspect_names))
        for row in mat:
            writer.writerow([repr(float(x)) for x in row])
