"""Ranking and pointwise log-posterior objectives.

The pairwise order probability is the Gaussian tail
``0.5 * (1 - erf(-mu / sqrt(2 * var)))`` of the projected difference vector.
Its log goes through the scaled complementary error function so the value
and the gradient coefficient stay finite and accurate far into the tail,
where ``1 - erf`` underflows.
"""

import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.special import erfc, erfcx

from . import covlinalg
from .data import Observation
from .errors import DegenerateVarianceError, InvalidInputError
from .model import (CovarianceSet, Hyperparams, LatentFactors, log_prior_covariance,
                    log_prior_factors)

_SQRT_2PI = math.sqrt(2.0 * math.pi)


@dataclass
class TripleSample:
    """A (user, preferred item, other item) comparison with its observed difference."""

    u: int
    i: int
    j: int
    d: NDArray
    mask: NDArray

    def __post_init__(self):
        self.d = np.asarray(self.d, dtype=float)
        self.mask = np.asarray(self.mask, dtype=float)
        if self.i == self.j:
            raise InvalidInputError("triple needs two distinct items")
        if np.any(self.d[self.mask == 0.0] != 0.0):
            raise InvalidInputError("masked-out difference entries must be zero")
        if not np.any(self.d != 0.0):
            raise InvalidInputError("difference vector is all-zero after masking")


def log_half_erfc(z: float) -> float:
    """``ln(0.5 * erfc(z))`` without underflow for large positive z."""
    if z < 0.0:
        return math.log(0.5 * erfc(z))
    return math.log(0.5 * erfcx(z)) - z * z


def tail_coefficient(z: float) -> float:
    """``2 * exp(-z^2) / (sqrt(2*pi) * erfc(z))``, the shared gradient scalar."""
    if z <= 0.0:
        return 2.0 * math.exp(-z * z) / (_SQRT_2PI * erfc(z))
    return 2.0 / (_SQRT_2PI * erfcx(z))


def order_log_prob(mu_dot: float, var_d: float) -> float:
    """Log-probability that the projected difference lands on the observed side."""
    if not var_d > 0.0:
        raise DegenerateVarianceError(f"projected variance must be positive, got {var_d}")
    z = -mu_dot / math.sqrt(2.0 * var_d)
    return log_half_erfc(z)


def weighted_difference(d: NDArray, weights: NDArray) -> NDArray:
    """Elementwise aspect weighting of a difference vector."""
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0):
        raise InvalidInputError("aspect weights must be nonnegative")
    return np.asarray(d, dtype=float) * w


def triple_projection(factors: LatentFactors, t: TripleSample,
                      weights: NDArray) -> tuple[float, NDArray]:
    """Projected mean ``((U_u * (V_i - V_j)) W^T) . wD`` and the weighted difference."""
    wd = weighted_difference(t.d, weights)
    mean = (factors.U[t.u] * (factors.V[t.i] - factors.V[t.j])) @ factors.W.T
    return float(mean @ wd), wd


def _triple_identity(t: TripleSample) -> str:
    return f"triple (u={t.u}, i={t.i}, j={t.j})"


def bpmr_data_term(factors: LatentFactors, sigma_for_triple, triples, weights) -> float:
    """Sum of order log-probabilities; ``sigma_for_triple`` maps a triple to its covariance."""
    total = 0.0
    for t in triples:
        mu_dot, wd = triple_projection(factors, t, weights)
        sigma = sigma_for_triple(t)
        try:
            total += order_log_prob(mu_dot, float(wd @ sigma @ wd))
        except DegenerateVarianceError as exc:
            raise DegenerateVarianceError(f"{exc} at {_triple_identity(t)}") from exc
    return total


def bpmr_log_posterior_global(factors: LatentFactors, l_global: NDArray, triples,
                              hp: Hyperparams, psi_g: NDArray,
                              data_scale: float = 1.0) -> float:
    """Pairwise objective with the shared covariance used for every triple."""
    sigma_g = covlinalg.make_covariance(l_global)
    weights = hp.weights(sigma_g.shape[0])
    data = bpmr_data_term(factors, lambda t: sigma_g, triples, weights)
    return (data_scale * data
            + log_prior_covariance(sigma_g, psi_g, hp.nu_g)
            + log_prior_factors(factors, hp))


def bpmr_log_posterior_personalized(factors: LatentFactors, cov: CovarianceSet, triples,
                                    hp: Hyperparams, sigma_g: NDArray,
                                    data_scale: float = 1.0) -> float:
    """Pairwise objective with per-entity covariance composition and priors."""
    k = sigma_g.shape[0]
    weights = hp.weights(k)
    psi_p = hp.nu_p * sigma_g

    def sigma_for_triple(t: TripleSample) -> NDArray:
        return covlinalg.compose_triple_covariance(
            cov.sigma_user(t.u), cov.sigma_item(t.i), cov.sigma_item(t.j), hp.lam)

    data = bpmr_data_term(factors, sigma_for_triple, triples, weights)
    prior = 0.0
    for u in range(factors.n_users):
        prior += log_prior_covariance(cov.sigma_user(u), psi_p, hp.nu_p)
    for i in range(factors.n_items):
        prior += log_prior_covariance(cov.sigma_item(i), psi_p, hp.nu_p)
    return data_scale * data + prior + log_prior_factors(factors, hp)


def masked_residual(factors: LatentFactors, obs: Observation) -> NDArray:
    pred = (factors.U[obs.user] * factors.V[obs.item]) @ factors.W.T
    return obs.mask * (obs.ratings - pred)


def pmtf_data_term(factors: LatentFactors, sigma_for_obs, observations) -> float:
    """Masked multivariate-Gaussian quadratic form summed over observations."""
    total = 0.0
    for obs in observations:
        sigma = sigma_for_obs(obs)
        resid = masked_residual(factors, obs)
        total += -0.5 * (float(resid @ covlinalg.inverse_spd(sigma) @ resid)
                         + covlinalg.log_det(sigma))
    return total


def pmtf_log_posterior_global(factors: LatentFactors, l_global: NDArray, observations,
                              hp: Hyperparams, psi_g: NDArray,
                              data_scale: float = 1.0) -> float:
    """Pointwise objective with the shared covariance."""
    if not observations:
        raise InvalidInputError("need at least one observation")
    sigma_g = covlinalg.make_covariance(l_global)
    data = pmtf_data_term(factors, lambda obs: sigma_g, observations)
    return (data_scale * data
            + log_prior_covariance(sigma_g, psi_g, hp.nu_g)
            + log_prior_factors(factors, hp))


def pmtf_log_posterior_personalized(factors: LatentFactors, cov: CovarianceSet, observations,
                                    hp: Hyperparams, sigma_g: NDArray,
                                    data_scale: float = 1.0) -> float:
    """Pointwise objective with per-pair covariance composition and priors."""
    if not observations:
        raise InvalidInputError("need at least one observation")
    psi_p = hp.nu_p * sigma_g

    def sigma_for_obs(obs: Observation) -> NDArray:
        return covlinalg.compose_pair_covariance(
            cov.sigma_user(obs.user), cov.sigma_item(obs.item), hp.lam)

    data = pmtf_data_term(factors, sigma_for_obs, observations)
    prior = 0.0
    for u in range(factors.n_users):
        prior += log_prior_covariance(cov.sigma_user(u), psi_p, hp.nu_p)
    for i in range(factors.n_items):
        prior += log_prior_covariance(cov.sigma_item(i), psi_p, hp.nu_p)
    return data_scale * data + prior + log_prior_factors(factors, hp)
