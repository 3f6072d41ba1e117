"""Random small instances for finite-difference gradient verification.

Each builder returns a zero-argument objective closure reading a set of
parameter arrays in place, plus the matching analytic gradient, so the
central-difference checker can perturb entries one at a time.
"""

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from . import baselines, covlinalg, gradients, objectives
from .data import Observation
from .errors import InvalidInputError
from .model import CovarianceSet, Hyperparams, LatentFactors
from .objectives import TripleSample

OBJECTIVES = ("bpmr-global", "bpmr-personalized", "pmtf-global",
              "pmtf-personalized", "ptf", "bpr")
DEFAULT_TOLERANCE = 1e-4


@dataclass
class CheckResult:
    objective: str
    seed: int
    errors: dict[str, float]

    @property
    def max_error(self) -> float:
        return max(self.errors.values())


def _random_factors(rng: np.random.Generator, m: int, n: int, k: int,
                    d: int) -> LatentFactors:
    return LatentFactors(
        U=0.5 * rng.standard_normal((m, d)),
        V=0.5 * rng.standard_normal((n, d)),
        W=0.5 * rng.standard_normal((k, d)),
    )


def _random_cov_factor(rng: np.random.Generator, k: int) -> NDArray:
    return np.eye(k) + 0.3 * rng.standard_normal((k, k))


def _random_triples(rng: np.random.Generator, m: int, n: int, k: int,
                    count: int) -> list[TripleSample]:
    out = []
    while len(out) < count:
        u = int(rng.integers(m))
        i, j = rng.choice(n, size=2, replace=False)
        mask = np.ones(k)
        if k > 1 and rng.random() < 0.3:
            mask[int(rng.integers(k))] = 0.0
        d = rng.standard_normal(k) * mask
        if not np.any(d != 0.0):
            continue
        out.append(TripleSample(u=int(u), i=int(i), j=int(j), d=d, mask=mask))
    return out


def _random_observations(rng: np.random.Generator, m: int, n: int, k: int,
                         count: int) -> list[Observation]:
    out = []
    for _ in range(count):
        u = int(rng.integers(m))
        i = int(rng.integers(n))
        mask = np.ones(k)
        if k > 1 and rng.random() < 0.3:
            mask[int(rng.integers(k))] = 0.0
        out.append(Observation(u, i, rng.standard_normal(k) * mask, mask))
    return out


def _bundle_to_dict(bundle: gradients.GradientBundle,
                    want_global: bool) -> dict[str, NDArray]:
    out = {"U": bundle.dU, "V": bundle.dV, "W": bundle.dW}
    if want_global:
        out["L_G"] = bundle.dl_global
    for u, g in bundle.dl_user.items():
        out[f"L_u{u}"] = g
    for i, g in bundle.dl_item.items():
        out[f"L_i{i}"] = g
    return out


def run_check(objective: str, seed: int, m: int = 4, n: int = 5, k: int = 3,
              d: int = 2, n_samples: int = 12, h: float = 1e-5) -> CheckResult:
    """Build a random instance of one objective and compare its analytic
    gradient against central finite differences, block by block."""
    if objective not in OBJECTIVES:
        raise InvalidInputError(f"unknown objective {objective!r}; "
                                f"choose from {', '.join(OBJECTIVES)}")
    rng = np.random.default_rng(seed)
    factors = _random_factors(rng, m, n, k, d)
    hp = Hyperparams(d=d, lam=0.4, nu_g=k + 3.0, nu_p=k + 2.0, seed=seed)
    params = {"U": factors.U, "V": factors.V, "W": factors.W}

    if objective in ("bpmr-global", "pmtf-global"):
        l_global = _random_cov_factor(rng, k)
        psi_g = hp.nu_g * covlinalg.make_covariance(_random_cov_factor(rng, k))
        params["L_G"] = l_global
        if objective == "bpmr-global":
            data = _random_triples(rng, m, n, k, n_samples)
            fn = lambda: objectives.bpmr_log_posterior_global(
                factors, l_global, data, hp, psi_g)
            bundle = gradients.bpmr_grad_global(factors, l_global, data, hp, psi_g)
        else:
            data = _random_observations(rng, m, n, k, n_samples)
            fn = lambda: objectives.pmtf_log_posterior_global(
                factors, l_global, data, hp, psi_g)
            bundle = gradients.pmtf_grad_global(factors, l_global, data, hp, psi_g)
        analytic = _bundle_to_dict(bundle, want_global=True)
    elif objective in ("bpmr-personalized", "pmtf-personalized"):
        sigma_g = covlinalg.make_covariance(_random_cov_factor(rng, k))
        cov = CovarianceSet(
            l_global=covlinalg.cholesky_spd(sigma_g),
            l_user={u: _random_cov_factor(rng, k) for u in range(m)},
            l_item={i: _random_cov_factor(rng, k) for i in range(n)},
        )
        for u, L in cov.l_user.items():
            params[f"L_u{u}"] = L
        for i, L in cov.l_item.items():
            params[f"L_i{i}"] = L
        if objective == "bpmr-personalized":
            data = _random_triples(rng, m, n, k, n_samples)
            fn = lambda: objectives.bpmr_log_posterior_personalized(
                factors, cov, data, hp, sigma_g)
            bundle = gradients.bpmr_grad_personalized(factors, cov, data, hp, sigma_g)
        else:
            data = _random_observations(rng, m, n, k, n_samples)
            fn = lambda: objectives.pmtf_log_posterior_personalized(
                factors, cov, data, hp, sigma_g)
            bundle = gradients.pmtf_grad_personalized(factors, cov, data, hp, sigma_g)
        analytic = _bundle_to_dict(bundle, want_global=False)
    elif objective == "ptf":
        data = _random_observations(rng, m, n, k, n_samples)
        noise = 0.7
        fn = lambda: baselines.ptf_objective(factors, data, noise, hp)
        analytic = _bundle_to_dict(
            baselines.ptf_grad(factors, data, noise, hp), want_global=False)
    else:
        data = _random_triples(rng, m, n, k, n_samples)
        fn = lambda: baselines.bpr_objective(factors, data, 0, hp)
        analytic = _bundle_to_dict(
            baselines.bpr_grad(factors, data, 0, hp), want_global=False)

    errors = gradients.finite_difference_check(fn, params, analytic, h=h)
    return CheckResult(objective=objective, seed=seed, errors=errors)
