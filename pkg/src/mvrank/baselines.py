"""Pointwise (independent-Gaussian) and single-aspect sigmoid-pairwise baselines.

Both share the CP prediction core and the trainer's sampling/AdaGrad
machinery so comparisons against the multivariate models are controlled.
"""

import numpy as np
from numpy.typing import NDArray

from .errors import InvalidInputError
from .gradients import GradientBundle, _empty_bundle, _factor_prior_grads
from .model import Hyperparams, LatentFactors, log_prior_factors
from .objectives import TripleSample

_LOG_2PI = float(np.log(2.0 * np.pi))


def ptf_objective(factors: LatentFactors, observations, noise_sigma2: float,
                  hp: Hyperparams, data_scale: float = 1.0) -> float:
    """Independent-Gaussian log-likelihood over observed aspect ratings, plus priors.

    Equals the multivariate pointwise objective with a fixed diagonal
    covariance and no covariance prior, up to constants.
    """
    if noise_sigma2 <= 0:
        raise InvalidInputError("noise variance must be positive")
    data = 0.0
    for obs in observations:
        resid = obs.mask * (obs.ratings
                            - (factors.U[obs.user] * factors.V[obs.item]) @ factors.W.T)
        n_observed = float(np.sum(obs.mask))
        data += (-0.5 * float(resid @ resid) / noise_sigma2
                 - 0.5 * n_observed * (_LOG_2PI + np.log(noise_sigma2)))
    return data_scale * data + log_prior_factors(factors, hp)


def ptf_grad(factors: LatentFactors, observations, noise_sigma2: float,
             hp: Hyperparams, data_scale: float = 1.0,
             include_priors: bool = True) -> GradientBundle:
    bundle = _empty_bundle(factors)
    for obs in observations:
        resid = obs.mask * (obs.ratings
                            - (factors.U[obs.user] * factors.V[obs.item]) @ factors.W.T)
        gm = resid / noise_sigma2
        gw = gm @ factors.W
        bundle.dU[obs.user] += factors.V[obs.item] * gw
        bundle.dV[obs.item] += factors.U[obs.user] * gw
        bundle.dW += np.outer(gm, factors.U[obs.user] * factors.V[obs.item])
    bundle.dU *= data_scale
    bundle.dV *= data_scale
    bundle.dW *= data_scale
    if include_priors:
        _factor_prior_grads(bundle, factors, hp)
    bundle.assert_finite()
    return bundle


def _log_sigmoid(x: float) -> float:
    return -float(np.logaddexp(0.0, -x))


def _aspect_score(factors: LatentFactors, u: int, i: int, aspect: int) -> float:
    return float((factors.U[u] * factors.V[i]) @ factors.W[aspect])


def _oriented(t: TripleSample, aspect: int) -> tuple[int, int] | None:
    """Preferred/other items on the chosen aspect; None when the aspect is silent."""
    diff = float(t.d[aspect])
    if t.mask[aspect] == 0.0 or diff == 0.0:
        return None
    return (t.i, t.j) if diff > 0 else (t.j, t.i)


def bpr_objective(factors: LatentFactors, triples, aspect: int, hp: Hyperparams,
                  data_scale: float = 1.0) -> float:
    """Sum of log-sigmoid pairwise terms on one aspect's predicted scores, plus priors."""
    if not 0 <= aspect < factors.n_aspects:
        raise InvalidInputError(f"aspect index {aspect} out of range")
    data = 0.0
    for t in triples:
        pair = _oriented(t, aspect)
        if pair is None:
            continue
        hi, lo = pair
        data += _log_sigmoid(_aspect_score(factors, t.u, hi, aspect)
                             - _aspect_score(factors, t.u, lo, aspect))
    return data_scale * data + log_prior_factors(factors, hp)


def bpr_grad(factors: LatentFactors, triples, aspect: int, hp: Hyperparams,
             data_scale: float = 1.0,
             include_priors: bool = True) -> GradientBundle:
    bundle = _empty_bundle(factors)
    w_row = factors.W[aspect]
    for t in triples:
        pair = _oriented(t, aspect)
        if pair is None:
            continue
        hi, lo = pair
        margin = (_aspect_score(factors, t.u, hi, aspect)
                  - _aspect_score(factors, t.u, lo, aspect))
        coeff = 1.0 / (1.0 + np.exp(margin)) if margin > -30 else 1.0
        bundle.dU[t.u] += coeff * (factors.V[hi] - factors.V[lo]) * w_row
        bundle.dV[hi] += coeff * factors.U[t.u] * w_row
        bundle.dV[lo] += -coeff * factors.U[t.u] * w_row
        bundle.dW[aspect] += coeff * factors.U[t.u] * (factors.V[hi] - factors.V[lo])
    bundle.dU *= data_scale
    bundle.dV *= data_scale
    bundle.dW *= data_scale
    if include_priors:
        _factor_prior_grads(bundle, factors, hp)
    bundle.assert_finite()
    return bundle
