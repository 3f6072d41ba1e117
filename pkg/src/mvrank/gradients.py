"""Analytic gradients of the four objectives plus a finite-difference oracle.

Gradients with respect to covariance matrices treat the entries as
unconstrained and are chained to the free factor via ``dL = 2 * dSigma @ L``,
so only L is ever updated and symmetry never needs restoring.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from . import covlinalg
from .data import Observation
from .errors import DegenerateVarianceError, InvalidInputError
from .model import CovarianceSet, Hyperparams, LatentFactors
from .objectives import (TripleSample, tail_coefficient, triple_projection)


@dataclass
class GradientBundle:
    """Dense factor gradients plus per-entity covariance-factor gradients."""

    dU: NDArray
    dV: NDArray
    dW: NDArray
    dl_global: NDArray | None = None
    dl_user: dict[int, NDArray] = field(default_factory=dict)
    dl_item: dict[int, NDArray] = field(default_factory=dict)

    def assert_finite(self) -> None:
        arrays = [self.dU, self.dV, self.dW]
        if self.dl_global is not None:
            arrays.append(self.dl_global)
        arrays.extend(self.dl_user.values())
        arrays.extend(self.dl_item.values())
        for arr in arrays:
            if not np.all(np.isfinite(arr)):
                raise InvalidInputError("gradient bundle has non-finite entries")

    def add(self, other: "GradientBundle") -> "GradientBundle":
        self.dU += other.dU
        self.dV += other.dV
        self.dW += other.dW
        if other.dl_global is not None:
            if self.dl_global is None:
                self.dl_global = other.dl_global.copy()
            else:
                self.dl_global += other.dl_global
        for key, val in other.dl_user.items():
            if key in self.dl_user:
                self.dl_user[key] += val
            else:
                self.dl_user[key] = val.copy()
        for key, val in other.dl_item.items():
            if key in self.dl_item:
                self.dl_item[key] += val
            else:
                self.dl_item[key] = val.copy()
        return self


def _empty_bundle(factors: LatentFactors) -> GradientBundle:
    return GradientBundle(
        dU=np.zeros_like(factors.U),
        dV=np.zeros_like(factors.V),
        dW=np.zeros_like(factors.W),
    )


def _factor_prior_grads(bundle: GradientBundle, factors: LatentFactors,
                        hp: Hyperparams) -> None:
    bundle.dU += -factors.U / hp.sigma2_u
    bundle.dV += -factors.V / hp.sigma2_v
    bundle.dW += -factors.W / hp.sigma2_w


def covariance_prior_grad(sigma: NDArray, psi: NDArray, nu: float) -> NDArray:
    """d/dSigma of the inverse-Wishart log-density (entries unconstrained)."""
    k = sigma.shape[0]
    sigma_inv = covlinalg.inverse_spd(sigma)
    return 0.5 * sigma_inv @ psi @ sigma_inv - 0.5 * (nu + k + 1) * sigma_inv


def _triple_geometry(factors: LatentFactors, t: TripleSample, weights: NDArray,
                     sigma: NDArray):
    mu_dot, wd = triple_projection(factors, t, weights)
    var = float(wd @ sigma @ wd)
    if not var > 0.0:
        raise DegenerateVarianceError(
            f"projected variance {var} at triple (u={t.u}, i={t.i}, j={t.j})")
    z = -mu_dot / math.sqrt(2.0 * var)
    c = tail_coefficient(z)
    dmu = c / math.sqrt(var)
    dvar = -0.5 * c * mu_dot / var ** 1.5
    return wd, dmu, dvar


def _accumulate_triple_factor_grads(bundle: GradientBundle, factors: LatentFactors,
                                    t: TripleSample, wd: NDArray, dmu: float) -> None:
    wdw = wd @ factors.W
    bundle.dU[t.u] += dmu * (factors.V[t.i] - factors.V[t.j]) * wdw
    bundle.dV[t.i] += dmu * factors.U[t.u] * wdw
    bundle.dV[t.j] += -dmu * factors.U[t.u] * wdw
    bundle.dW += dmu * np.outer(wd, factors.U[t.u] * (factors.V[t.i] - factors.V[t.j]))


def bpmr_grad_global(factors: LatentFactors, l_global: NDArray, triples,
                     hp: Hyperparams, psi_g: NDArray,
                     data_scale: float = 1.0,
                     include_priors: bool = True) -> GradientBundle:
    """Gradient of the pairwise objective with the shared covariance."""
    sigma_g = covlinalg.make_covariance(l_global)
    weights = hp.weights(sigma_g.shape[0])
    bundle = _empty_bundle(factors)
    d_sigma = np.zeros_like(sigma_g)
    for t in triples:
        wd, dmu, dvar = _triple_geometry(factors, t, weights, sigma_g)
        _accumulate_triple_factor_grads(bundle, factors, t, wd, dmu)
        d_sigma += dvar * np.outer(wd, wd)
    bundle.dU *= data_scale
    bundle.dV *= data_scale
    bundle.dW *= data_scale
    d_sigma = data_scale * d_sigma
    if include_priors:
        d_sigma = d_sigma + covariance_prior_grad(sigma_g, psi_g, hp.nu_g)
        _factor_prior_grads(bundle, factors, hp)
    bundle.dl_global = 2.0 * d_sigma @ l_global
    bundle.assert_finite()
    return bundle


def bpmr_grad_personalized(factors: LatentFactors, cov: CovarianceSet, triples,
                           hp: Hyperparams, sigma_g: NDArray,
                           data_scale: float = 1.0,
                           include_priors: bool = True) -> GradientBundle:
    """Gradient of the personalized pairwise objective.

    Entities without their own covariance factor fall back to the global
    one, which is treated as fixed here: only per-entity factors receive
    covariance gradients.
    """
    k = sigma_g.shape[0]
    weights = hp.weights(k)
    psi_p = hp.nu_p * sigma_g
    bundle = _empty_bundle(factors)
    d_sigma_user = {u: np.zeros((k, k)) for u in cov.l_user}
    d_sigma_item = {i: np.zeros((k, k)) for i in cov.l_item}
    for t in triples:
        sigma = covlinalg.compose_triple_covariance(
            cov.sigma_user(t.u), cov.sigma_item(t.i), cov.sigma_item(t.j), hp.lam)
        wd, dmu, dvar = _triple_geometry(factors, t, weights, sigma)
        _accumulate_triple_factor_grads(bundle, factors, t, wd, dmu)
        d_sigma_uij = dvar * np.outer(wd, wd)
        if t.u in d_sigma_user:
            d_sigma_user[t.u] += 2.0 * hp.lam * d_sigma_uij
        for item in (t.i, t.j):
            if item in d_sigma_item:
                d_sigma_item[item] += (1.0 - hp.lam) * d_sigma_uij
    bundle.dU *= data_scale
    bundle.dV *= data_scale
    bundle.dW *= data_scale
    for u, l_u in cov.l_user.items():
        total = data_scale * d_sigma_user[u]
        if include_priors:
            total = total + covariance_prior_grad(cov.sigma_user(u), psi_p, hp.nu_p)
        bundle.dl_user[u] = 2.0 * total @ l_u
    for i, l_i in cov.l_item.items():
        total = data_scale * d_sigma_item[i]
        if include_priors:
            total = total + covariance_prior_grad(cov.sigma_item(i), psi_p, hp.nu_p)
        bundle.dl_item[i] = 2.0 * total @ l_i
    if include_priors:
        _factor_prior_grads(bundle, factors, hp)
    bundle.assert_finite()
    return bundle


def _accumulate_obs_factor_grads(bundle: GradientBundle, factors: LatentFactors,
                                 obs: Observation, gm: NDArray) -> None:
    gw = gm @ factors.W
    bundle.dU[obs.user] += factors.V[obs.item] * gw
    bundle.dV[obs.item] += factors.U[obs.user] * gw
    bundle.dW += np.outer(gm, factors.U[obs.user] * factors.V[obs.item])


def pmtf_grad_global(factors: LatentFactors, l_global: NDArray, observations,
                     hp: Hyperparams, psi_g: NDArray,
                     data_scale: float = 1.0,
                     include_priors: bool = True) -> GradientBundle:
    """Gradient of the pointwise objective with the shared covariance."""
    sigma_g = covlinalg.make_covariance(l_global)
    sigma_inv = covlinalg.inverse_spd(sigma_g)
    bundle = _empty_bundle(factors)
    d_sigma = np.zeros_like(sigma_g)
    for obs in observations:
        resid = obs.mask * (obs.ratings
                            - (factors.U[obs.user] * factors.V[obs.item]) @ factors.W.T)
        si_e = sigma_inv @ resid
        _accumulate_obs_factor_grads(bundle, factors, obs, obs.mask * si_e)
        d_sigma += 0.5 * np.outer(si_e, si_e) - 0.5 * sigma_inv
    bundle.dU *= data_scale
    bundle.dV *= data_scale
    bundle.dW *= data_scale
    d_sigma = data_scale * d_sigma
    if include_priors:
        d_sigma = d_sigma + covariance_prior_grad(sigma_g, psi_g, hp.nu_g)
        _factor_prior_grads(bundle, factors, hp)
    bundle.dl_global = 2.0 * d_sigma @ l_global
    bundle.assert_finite()
    return bundle


def pmtf_grad_personalized(factors: LatentFactors, cov: CovarianceSet, observations,
                           hp: Hyperparams, sigma_g: NDArray,
                           data_scale: float = 1.0,
                           include_priors: bool = True) -> GradientBundle:
    """Gradient of the personalized pointwise objective."""
    k = sigma_g.shape[0]
    psi_p = hp.nu_p * sigma_g
    bundle = _empty_bundle(factors)
    d_sigma_user = {u: np.zeros((k, k)) for u in cov.l_user}
    d_sigma_item = {i: np.zeros((k, k)) for i in cov.l_item}
    for obs in observations:
        sigma = covlinalg.compose_pair_covariance(
            cov.sigma_user(obs.user), cov.sigma_item(obs.item), hp.lam)
        sigma_inv = covlinalg.inverse_spd(sigma)
        resid = obs.mask * (obs.ratings
                            - (factors.U[obs.user] * factors.V[obs.item]) @ factors.W.T)
        si_e = sigma_inv @ resid
        _accumulate_obs_factor_grads(bundle, factors, obs, obs.mask * si_e)
        d_sigma_ui = 0.5 * np.outer(si_e, si_e) - 0.5 * sigma_inv
        if obs.user in d_sigma_user:
            d_sigma_user[obs.user] += hp.lam * d_sigma_ui
        if obs.item in d_sigma_item:
            d_sigma_item[obs.item] += (1.0 - hp.lam) * d_sigma_ui
    bundle.dU *= data_scale
    bundle.dV *= data_scale
    bundle.dW *= data_scale
    for u, l_u in cov.l_user.items():
        total = data_scale * d_sigma_user[u]
        if include_priors:
            total = total + covariance_prior_grad(cov.sigma_user(u), psi_p, hp.nu_p)
        bundle.dl_user[u] = 2.0 * total @ l_u
    for i, l_i in cov.l_item.items():
        total = data_scale * d_sigma_item[i]
        if include_priors:
            total = total + covariance_prior_grad(cov.sigma_item(i), psi_p, hp.nu_p)
        bundle.dl_item[i] = 2.0 * total @ l_i
    if include_priors:
        _factor_prior_grads(bundle, factors, hp)
    bundle.assert_finite()
    return bundle


def finite_difference_check(objective, params: dict[str, NDArray],
                            analytic: dict[str, NDArray],
                            h: float = 1e-5) -> dict[str, float]:
    """Central differences per scalar parameter vs the analytic gradient.

    ``objective`` is a zero-argument callable reading the (mutated in place)
    arrays in ``params``. Relative error uses max(1, |analytic|, |numeric|)
    as the denominator. Returns the max relative error per parameter block.
    """
    if not 1e-7 <= h <= 1e-3:
        raise InvalidInputError("finite-difference step must lie in [1e-7, 1e-3]")
    errors: dict[str, float] = {}
    for name, arr in params.items():
        grad = analytic[name]
        worst = 0.0
        flat = arr.reshape(-1)
        gflat = np.asarray(grad).reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            f_plus = objective()
            flat[idx] = orig - h
            f_minus = objective()
            flat[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            denom = max(1.0, abs(gflat[idx]), abs(numeric))
            worst = max(worst, abs(numeric - gflat[idx]) / denom)
        errors[name] = worst
    return errors
