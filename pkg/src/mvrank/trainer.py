"""Alternating block-coordinate training loop.

Each EM step runs a factor block, then (for the multivariate modes) a
global-covariance block and a personalized-covariance block, all driven by
bootstrap-sampled batches and AdaGrad ascent on the log-posterior.

Randomness comes from a single seed: the root ``SeedSequence`` spawns, in
order, one stream for initialization, one for fixed validation/monitoring
artifacts, then one stream per EM step (each split again per phase).
Batch gradients are accumulated chunk-by-chunk in a fixed order, so results
are bit-identical for a given seed regardless of the worker-thread count.
"""

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from . import baselines, covlinalg, gradients, objectives
from .checkpoint import save_checkpoint
from .data import Dataset, empirical_covariance
from .errors import DataError, InvalidInputError, NumericError
from .model import CovarianceSet, Hyperparams, LatentFactors, Model
from .objectives import TripleSample

MODES = ("pmtf-predict", "bpmr-rank", "ptf-baseline", "bpr-baseline")
RANKING_MODES = ("bpmr-rank", "bpr-baseline")
ADAGRAD_EPS = 1e-8
CHUNK_SIZE = 256


@dataclass
class TrainConfig:
    mode: str
    hp: Hyperparams
    max_em_steps: int = 30
    patience: int = 5
    validation_tolerance: float = 1e-4
    checkpoint_path: str | None = None
    log_path: str | None = None
    log_every: int = 1
    threads: int = 1
    bpr_aspect: int = 0
    ptf_noise_sigma2: float = 1.0
    # Entities below this training-observation count keep the global covariance.
    min_personal_obs: int = 3
    val_sample_size: int = 2000
    # Covariance phases start only after this many factor-only EM steps, so
    # the noise model cannot absorb still-unfit mean structure early on.
    cov_warmup_steps: int = 0

    def validate(self) -> None:
        if self.mode not in MODES:
            raise InvalidInputError(f"unknown mode {self.mode!r}")
        if self.max_em_steps < 0:
            raise InvalidInputError("max_em_steps must be >= 0")
        if self.patience < 1:
            raise InvalidInputError("patience must be >= 1")
        if self.validation_tolerance <= 0:
            raise InvalidInputError("validation_tolerance must be positive")
        if self.threads < 1:
            raise InvalidInputError("threads must be >= 1")


@dataclass
class OptimizerState:
    """AdaGrad squared-gradient accumulators, keyed per parameter block."""

    accum: dict[str, NDArray] = field(default_factory=dict)
    step: int = 0


def adagrad_update(state: OptimizerState, key: str, param: NDArray, grad: NDArray,
                   lr: float) -> None:
    """In-place ascent step ``param += lr * g / sqrt(G + eps)``."""
    if param.shape != grad.shape:
        raise InvalidInputError(f"shape mismatch for block {key}")
    acc = state.accum.get(key)
    if acc is None:
        acc = np.zeros_like(param)
        state.accum[key] = acc
    acc += grad * grad
    param += lr * grad / np.sqrt(acc + ADAGRAD_EPS)


@dataclass
class HistoryRecord:
    em_step: int
    train_objective: float
    val_metric: float
    wall_ms: float


def sample_triples(ds: Dataset, rng: np.random.Generator, count: int,
                   max_attempts_per_sample: int = 1000) -> list[TripleSample]:
    """Bootstrap-sample comparison triples.

    Draws an observed (u, i) uniformly with replacement, then a second item j
    uniformly from the catalog for the same user. An observed j yields the
    masked observed difference; an unobserved j stands in with a zero rating
    vector. Degenerate draws (j == i, all-zero difference) are redrawn.
    """
    if not ds.observations:
        raise DataError("cannot sample triples from an empty observation set")
    by_pair = {(o.user, o.item): o for o in ds.observations}
    n_items = ds.n_items
    out: list[TripleSample] = []
    attempts = 0
    budget = max(1, count) * max_attempts_per_sample
    while len(out) < count:
        attempts += 1
        if attempts > budget:
            raise DataError("could not sample enough non-degenerate triples")
        obs = ds.observations[int(rng.integers(len(ds.observations)))]
        j = int(rng.integers(n_items))
        if j == obs.item:
            continue
        other = by_pair.get((obs.user, j))
        if other is None:
            mask = obs.mask.copy()
            d = obs.ratings * mask
        else:
            mask = obs.mask * other.mask
            d = (obs.ratings - other.ratings) * mask
        if not np.any(d != 0.0):
            continue
        out.append(TripleSample(u=obs.user, i=obs.item, j=j, d=d, mask=mask))
    return out


def convergence_check(val_metrics, patience: int, tolerance: float) -> bool:
    """True when the metric has not improved by more than tolerance for
    `patience` consecutive steps. Metrics are higher-is-better."""
    if not val_metrics:
        raise InvalidInputError("history must be nonempty")
    best = -np.inf
    stale = 0
    for value in val_metrics:
        if value > best + tolerance:
            best = value
            stale = 0
        else:
            stale += 1
    return stale >= patience


def _chunked(batch, size: int = CHUNK_SIZE):
    return [batch[i:i + size] for i in range(0, len(batch), size)]


def _batch_bundle(grad_fn, batch, threads: int,
                  n_train: int) -> gradients.GradientBundle:
    """Gradient of a batch, merged chunk-by-chunk in a fixed order.

    Data terms are scaled to full-dataset magnitude; prior terms are added
    exactly once via a final priors-only call.
    """
    scale = n_train / len(batch)
    chunks = _chunked(batch)

    def data_grad(chunk):
        return grad_fn(chunk, scale, False)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            bundles = list(pool.map(data_grad, chunks))
    else:
        bundles = [data_grad(chunk) for chunk in chunks]
    total = bundles[0]
    for bundle in bundles[1:]:
        total.add(bundle)
    total.add(grad_fn([], scale, True))
    return total


class _Run:
    """Mutable state of one training run."""

    def __init__(self, config: TrainConfig, train: Dataset, val: Dataset):
        config.validate()
        hp = config.hp
        hp.validate(train.n_aspects)
        if not train.observations:
            raise DataError("training split is empty")
        if not val.observations:
            raise DataError("validation split is empty")
        observed = np.concatenate([o.ratings[o.mask > 0]
                                   for o in train.observations])
        if observed.size and float(observed.max() - observed.min()) == 0.0:
            raise DataError("all observed ratings are identical; "
                            "no preference signal to fit")
        self.config = config
        self.hp = hp
        self.train = train
        self.val = val
        root = np.random.SeedSequence(hp.seed)
        init_ss, fixed_ss, *step_ss = root.spawn(2 + max(config.max_em_steps, 1))
        self.step_ss = step_ss
        rng = np.random.default_rng(init_ss)

        factors = LatentFactors.init_random(
            train.n_users, train.n_items, train.n_aspects, hp.d, rng)
        emp = empirical_covariance(train)
        l_global = covlinalg.cholesky_spd(emp)
        self.psi_g = hp.nu_g * emp
        cov = CovarianceSet(l_global=l_global)
        if config.mode in ("bpmr-rank", "pmtf-predict"):
            user_counts = train.user_observation_counts()
            item_counts = train.item_observation_counts()
            cov.l_user = {u: l_global.copy() for u in range(train.n_users)
                          if user_counts[u] >= config.min_personal_obs}
            cov.l_item = {i: l_global.copy() for i in range(train.n_items)
                          if item_counts[i] >= config.min_personal_obs}
        self.model = Model(
            factors=factors, cov=cov, hp=hp, mode=config.mode,
            aspects=list(train.aspects),
            user_ids=list(train.user_ids), item_ids=list(train.item_ids))
        self.opt = OptimizerState()
        self.n_train = len(train.observations)

        fixed_rng = np.random.default_rng(fixed_ss)
        monitor_size = min(hp.samples_per_iter, 512)
        if config.mode in RANKING_MODES:
            self.monitor_batch = sample_triples(train, fixed_rng, monitor_size)
            self.val_batch = sample_triples(
                val, fixed_rng, min(config.val_sample_size, 2000))
        else:
            idx = fixed_rng.permutation(self.n_train)[:monitor_size]
            self.monitor_batch = [train.observations[i] for i in idx]
            self.val_batch = val.observations

    # --- batches -----------------------------------------------------------

    def _draw_batch(self, rng: np.random.Generator):
        size = self.hp.samples_per_iter
        if self.config.mode in RANKING_MODES:
            return sample_triples(self.train, rng, size)
        idx = rng.integers(self.n_train, size=min(size, self.n_train))
        return [self.train.observations[i] for i in idx]

    # --- gradients per phase ----------------------------------------------

    def _factor_grad_fn(self):
        mode = self.config.mode
        factors = self.model.factors
        cov = self.model.cov
        hp = self.hp
        if mode == "bpmr-rank":
            sigma_g = cov.sigma_global()
            return lambda chunk, scale, priors: gradients.bpmr_grad_personalized(
                factors, cov, chunk, hp, sigma_g, scale, priors)
        if mode == "pmtf-predict":
            sigma_g = cov.sigma_global()
            return lambda chunk, scale, priors: gradients.pmtf_grad_personalized(
                factors, cov, chunk, hp, sigma_g, scale, priors)
        if mode == "ptf-baseline":
            return lambda chunk, scale, priors: baselines.ptf_grad(
                factors, chunk, self.config.ptf_noise_sigma2, hp, scale, priors)
        return lambda chunk, scale, priors: baselines.bpr_grad(
            factors, chunk, self.config.bpr_aspect, hp, scale, priors)

    def _global_grad_fn(self):
        factors = self.model.factors
        l_global = self.model.cov.l_global
        hp = self.hp
        if self.config.mode == "bpmr-rank":
            return lambda chunk, scale, priors: gradients.bpmr_grad_global(
                factors, l_global, chunk, hp, self.psi_g, scale, priors)
        return lambda chunk, scale, priors: gradients.pmtf_grad_global(
            factors, l_global, chunk, hp, self.psi_g, scale, priors)

    def _personal_grad_fn(self, sigma_g: NDArray):
        factors = self.model.factors
        cov = self.model.cov
        hp = self.hp
        if self.config.mode == "bpmr-rank":
            return lambda chunk, scale, priors: gradients.bpmr_grad_personalized(
                factors, cov, chunk, hp, sigma_g, scale, priors)
        return lambda chunk, scale, priors: gradients.pmtf_grad_personalized(
            factors, cov, chunk, hp, sigma_g, scale, priors)

    # --- phase drivers -----------------------------------------------------

    def _run_factor_phase(self, rng: np.random.Generator) -> None:
        lr = self.hp.learning_rate
        for _ in range(self.hp.sgd_iters_per_em):
            batch = self._draw_batch(rng)
            bundle = _batch_bundle(self._factor_grad_fn(), batch,
                                   self.config.threads, self.n_train)
            adagrad_update(self.opt, "U", self.model.factors.U, bundle.dU, lr)
            adagrad_update(self.opt, "V", self.model.factors.V, bundle.dV, lr)
            adagrad_update(self.opt, "W", self.model.factors.W, bundle.dW, lr)

    def _run_global_phase(self, rng: np.random.Generator) -> None:
        lr = self.hp.learning_rate
        for _ in range(self.hp.sgd_iters_per_em):
            batch = self._draw_batch(rng)
            bundle = _batch_bundle(self._global_grad_fn(), batch,
                                   self.config.threads, self.n_train)
            adagrad_update(self.opt, "L_G", self.model.cov.l_global, bundle.dl_global, lr)

    def _run_personal_phase(self, rng: np.random.Generator) -> None:
        lr = self.hp.learning_rate
        sigma_g = self.model.cov.sigma_global()
        for _ in range(self.hp.sgd_iters_per_em):
            batch = self._draw_batch(rng)
            bundle = _batch_bundle(self._personal_grad_fn(sigma_g), batch,
                                   self.config.threads, self.n_train)
            for u in sorted(bundle.dl_user):
                adagrad_update(self.opt, f"L_u{u}", self.model.cov.l_user[u],
                               bundle.dl_user[u], lr)
            for i in sorted(bundle.dl_item):
                adagrad_update(self.opt, f"L_i{i}", self.model.cov.l_item[i],
                               bundle.dl_item[i], lr)

    # --- monitoring --------------------------------------------------------

    def train_objective(self) -> float:
        mode = self.config.mode
        factors = self.model.factors
        cov = self.model.cov
        hp = self.hp
        scale = self.n_train / len(self.monitor_batch)
        if mode == "bpmr-rank":
            return objectives.bpmr_log_posterior_personalized(
                factors, cov, self.monitor_batch, hp, cov.sigma_global(), scale)
        if mode == "pmtf-predict":
            return objectives.pmtf_log_posterior_personalized(
                factors, cov, self.monitor_batch, hp, cov.sigma_global(), scale)
        if mode == "ptf-baseline":
            return baselines.ptf_objective(
                factors, self.monitor_batch, self.config.ptf_noise_sigma2, hp, scale)
        return baselines.bpr_objective(
            factors, self.monitor_batch, self.config.bpr_aspect, hp, scale)

    def val_metric(self) -> float:
        mode = self.config.mode
        factors = self.model.factors
        cov = self.model.cov
        hp = self.hp
        if mode == "bpmr-rank":
            weights = hp.weights(self.train.n_aspects)

            def sigma_for(t):
                return covlinalg.compose_triple_covariance(
                    cov.sigma_user(t.u), cov.sigma_item(t.i), cov.sigma_item(t.j), hp.lam)

            total = objectives.bpmr_data_term(factors, sigma_for, self.val_batch, weights)
            return total / len(self.val_batch)
        if mode == "bpr-baseline":
            hp_noprior = hp
            data = baselines.bpr_objective(factors, self.val_batch,
                                           self.config.bpr_aspect, hp_noprior, 1.0)
            data -= baselines.log_prior_factors(factors, hp_noprior)
            return data / len(self.val_batch)
        # Pointwise modes: negative masked RMSE over the validation split.
        sq_sum = 0.0
        n = 0.0
        for obs in self.val_batch:
            resid = objectives.masked_residual(factors, obs)
            sq_sum += float(resid @ resid)
            n += float(np.sum(obs.mask))
        return -float(np.sqrt(sq_sum / max(n, 1.0)))


def em_fit(config: TrainConfig, train: Dataset,
           val: Dataset) -> tuple[Model, list[HistoryRecord]]:
    """Run the alternating training loop until convergence or the step cap."""
    run = _Run(config, train, val)
    history: list[HistoryRecord] = []
    log_rows: list[list] = []
    multivariate = config.mode in ("bpmr-rank", "pmtf-predict")

    for step in range(config.max_em_steps):
        started = time.perf_counter()
        phase_ss = run.step_ss[step].spawn(3)
        run._run_factor_phase(np.random.default_rng(phase_ss[0]))
        if multivariate and step >= config.cov_warmup_steps:
            run._run_global_phase(np.random.default_rng(phase_ss[1]))
            run._run_personal_phase(np.random.default_rng(phase_ss[2]))

        train_obj = run.train_objective()
        val_metric = run.val_metric()
        wall_ms = 1000.0 * (time.perf_counter() - started)
        if not (np.isfinite(train_obj) and np.isfinite(val_metric)):
            _flush_log(config, log_rows)
            raise NumericError(
                f"non-finite objective at EM step {step}; last-good checkpoint retained")
        history.append(HistoryRecord(step, train_obj, val_metric, wall_ms))
        if config.checkpoint_path is not None:
            save_checkpoint(run.model, config.checkpoint_path)
        if step % max(config.log_every, 1) == 0:
            phase = "em" if multivariate else "factor"
            log_rows.append([step, phase, repr(train_obj), repr(val_metric),
                             f"{wall_ms:.1f}"])
        if convergence_check([h.val_metric for h in history],
                             config.patience, config.validation_tolerance):
            break

    if config.checkpoint_path is not None:
        save_checkpoint(run.model, config.checkpoint_path)
    _flush_log(config, log_rows)
    return run.model, history


def _flush_log(config: TrainConfig, rows) -> None:
    if config.log_path is None or not rows:
        return
    with open(config.log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["em_step", "phase", "train_objective", "val_metric", "wall_ms"])
        writer.writerows(rows)
