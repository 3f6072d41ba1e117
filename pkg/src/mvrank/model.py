"""Latent factors, hyperparameters, covariance storage and log-priors."""

from dataclasses import dataclass, field, replace

import numpy as np
from numpy.typing import NDArray
from scipy.special import multigammaln

from . import covlinalg
from .errors import InvalidInputError

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class Hyperparams:
    """Model and optimizer hyperparameters with published defaults."""

    d: int = 13
    sigma2_u: float = 1.0
    sigma2_v: float = 1.0
    sigma2_w: float = 1.0
    lam: float = 0.5
    nu_g: float = 50_000.0
    nu_p: float = 10.0
    aspect_weights: NDArray | None = None
    learning_rate: float = 0.03
    sgd_iters_per_em: int = 5
    samples_per_iter: int = 1000
    seed: int = 0

    def validate(self, k: int) -> None:
        if self.d < 1:
            raise InvalidInputError("latent dimension must be >= 1")
        for name in ("sigma2_u", "sigma2_v", "sigma2_w"):
            if getattr(self, name) <= 0:
                raise InvalidInputError(f"{name} must be positive")
        if not 0.0 <= self.lam <= 1.0:
            raise InvalidInputError("lam must lie in [0, 1]")
        if self.nu_g <= k - 1 or self.nu_p <= k - 1:
            raise InvalidInputError("inverse-Wishart dof must exceed K - 1")
        if self.learning_rate <= 0:
            raise InvalidInputError("learning_rate must be positive")
        w = self.weights(k)
        if w.shape != (k,) or np.any(w < 0) or not np.any(w > 0):
            raise InvalidInputError("aspect weights must be nonnegative, not all zero")

    def weights(self, k: int) -> NDArray:
        if self.aspect_weights is None:
            return np.ones(k)
        return np.asarray(self.aspect_weights, dtype=float)


@dataclass
class LatentFactors:
    """CP factor matrices for users (M x d), items (N x d) and aspects (K x d)."""

    U: NDArray
    V: NDArray
    W: NDArray

    def __post_init__(self):
        self.U = np.asarray(self.U, dtype=float)
        self.V = np.asarray(self.V, dtype=float)
        self.W = np.asarray(self.W, dtype=float)
        d = self.U.shape[1] if self.U.ndim == 2 else -1
        if self.V.ndim != 2 or self.W.ndim != 2 or self.V.shape[1] != d or self.W.shape[1] != d:
            raise InvalidInputError("factor matrices must share the latent dimension")
        for name, mat in (("U", self.U), ("V", self.V), ("W", self.W)):
            if not np.all(np.isfinite(mat)):
                raise InvalidInputError(f"factor matrix {name} has non-finite entries")

    @property
    def n_users(self) -> int:
        return self.U.shape[0]

    @property
    def n_items(self) -> int:
        return self.V.shape[0]

    @property
    def n_aspects(self) -> int:
        return self.W.shape[0]

    @property
    def dim(self) -> int:
        return self.U.shape[1]

    def copy(self) -> "LatentFactors":
        return LatentFactors(self.U.copy(), self.V.copy(), self.W.copy())

    @staticmethod
    def init_random(m: int, n: int, k: int, d: int, rng: np.random.Generator,
                    scale: float = 0.1) -> "LatentFactors":
        # Small-scale init keeps early z-values inside the stable erf range.
        return LatentFactors(
            U=scale * rng.standard_normal((m, d)),
            V=scale * rng.standard_normal((n, d)),
            W=scale * rng.standard_normal((k, d)),
        )


@dataclass
class CovarianceSet:
    """Global factor plus per-entity factors; entities fall back to the global one."""

    l_global: NDArray
    l_user: dict[int, NDArray] = field(default_factory=dict)
    l_item: dict[int, NDArray] = field(default_factory=dict)

    def sigma_global(self) -> NDArray:
        return covlinalg.make_covariance(self.l_global)

    def user_factor(self, u: int) -> NDArray:
        return self.l_user.get(u, self.l_global)

    def item_factor(self, i: int) -> NDArray:
        return self.l_item.get(i, self.l_global)

    def sigma_user(self, u: int) -> NDArray:
        return covlinalg.make_covariance(self.user_factor(u))

    def sigma_item(self, i: int) -> NDArray:
        return covlinalg.make_covariance(self.item_factor(i))

    def copy(self) -> "CovarianceSet":
        return CovarianceSet(
            l_global=self.l_global.copy(),
            l_user={u: L.copy() for u, L in self.l_user.items()},
            l_item={i: L.copy() for i, L in self.l_item.items()},
        )


def predict_aspect_vector(factors: LatentFactors, u: int, i: int) -> NDArray:
    """Predicted aspect-rating vector ``(U_u * V_i) @ W.T``."""
    if not 0 <= u < factors.n_users:
        raise InvalidInputError(f"user index {u} out of range")
    if not 0 <= i < factors.n_items:
        raise InvalidInputError(f"item index {i} out of range")
    return (factors.U[u] * factors.V[i]) @ factors.W.T


def predict_matrix(factors: LatentFactors, u: int) -> NDArray:
    """All-item prediction matrix (N x K) for one user."""
    return (factors.U[u] * factors.V) @ factors.W.T


def log_prior_factors(factors: LatentFactors, hp: Hyperparams) -> float:
    """Sum of the expanded spherical-Gaussian log-priors for U, V and W.

    Constants in sigma only; the 2*pi terms are dropped along with every
    other parameter-independent constant.
    """
    total = 0.0
    for mat, s2 in ((factors.U, hp.sigma2_u), (factors.V, hp.sigma2_v), (factors.W, hp.sigma2_w)):
        total += -0.5 * (np.sum(mat * mat) / s2 + mat.size * np.log(s2))
    return float(total)


def log_prior_covariance(sigma, psi, nu: float) -> float:
    """Inverse-Wishart log-density of a covariance matrix (full normalizer)."""
    sigma = np.asarray(sigma, dtype=float)
    psi = np.asarray(psi, dtype=float)
    k = sigma.shape[0]
    if nu <= k - 1:
        raise InvalidInputError("inverse-Wishart dof must exceed K - 1")
    sigma_inv = covlinalg.inverse_spd(sigma)
    return float(
        0.5 * nu * covlinalg.log_det(psi)
        - 0.5 * nu * k * np.log(2.0)
        - multigammaln(0.5 * nu, k)
        - 0.5 * (nu + k + 1) * covlinalg.log_det(sigma)
        - 0.5 * np.trace(psi @ sigma_inv)
    )


@dataclass
class Model:
    """A trained (or initialized) model: factors, covariances and bookkeeping."""

    factors: LatentFactors
    cov: CovarianceSet
    hp: Hyperparams
    mode: str
    aspects: list[str]
    user_ids: list[str]
    item_ids: list[str]

    def copy(self) -> "Model":
        return Model(
            factors=self.factors.copy(),
            cov=self.cov.copy(),
            hp=replace(self.hp),
            mode=self.mode,
            aspects=list(self.aspects),
            user_ids=list(self.user_ids),
            item_ids=list(self.item_ids),
        )
