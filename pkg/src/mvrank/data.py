"""Dataset ingestion, filtering, splitting and the synthetic generator.

File format: delimited text (tab by default) with header
``user_id<TAB>item_id<TAB><aspect names...>`` and one observation per row.
Missing aspect ratings use a configurable token (default ``NA``); aspect 0
is the overall rating by convention.
"""

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from . import covlinalg
from .errors import DataError, InvalidInputError

MISSING_TOKEN = "NA"
RATING_MIN = 1.0
RATING_MAX = 5.0


@dataclass
class Observation:
    """One (user, item) rating vector with its per-aspect observed mask."""

    user: int
    item: int
    ratings: NDArray
    mask: NDArray


@dataclass
class Dataset:
    user_ids: list[str]
    item_ids: list[str]
    aspects: list[str]
    observations: list[Observation]
    rating_scale: tuple[float, float] = (RATING_MIN, RATING_MAX)
    duplicate_count: int = 0

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def n_aspects(self) -> int:
        return len(self.aspects)

    def user_observation_counts(self) -> NDArray:
        counts = np.zeros(self.n_users, dtype=int)
        for obs in self.observations:
            counts[obs.user] += 1
        return counts

    def item_observation_counts(self) -> NDArray:
        counts = np.zeros(self.n_items, dtype=int)
        for obs in self.observations:
            counts[obs.item] += 1
        return counts

    def observed_pairs(self) -> set[tuple[int, int]]:
        return {(obs.user, obs.item) for obs in self.observations}


@dataclass
class SplitSpec:
    train_frac: float = 0.70
    val_frac: float = 0.15
    test_frac: float = 0.15
    seed: int = 0

    def __post_init__(self):
        total = self.train_frac + self.val_frac + self.test_frac
        if min(self.train_frac, self.val_frac, self.test_frac) <= 0:
            raise InvalidInputError("split fractions must be positive")
        if abs(total - 1.0) > 1e-9:
            raise InvalidInputError(f"split fractions must sum to 1, got {total}")


def ingest(path, delimiter: str = "\t", missing_token: str = MISSING_TOKEN,
           rating_scale: tuple[float, float] = (RATING_MIN, RATING_MAX)) -> Dataset:
    """Parse a delimited rating file into a Dataset. Duplicate (u, i) rows win last."""
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if len(header) < 3:
            raise DataError(f"{path}: header needs user_id, item_id and >= 1 aspect")
        aspects = header[2:]
        k = len(aspects)
        users: dict[str, int] = {}
        items: dict[str, int] = {}
        by_pair: dict[tuple[int, int], Observation] = {}
        duplicates = 0
        lo, hi = rating_scale
        for lineno, row in enumerate(reader, start=2):
            if len(row) != k + 2:
                raise DataError(f"{path}:{lineno}: expected {k + 2} columns, got {len(row)}")
            ratings = np.zeros(k)
            mask = np.ones(k)
            for a, token in enumerate(row[2:]):
                if token == missing_token:
                    mask[a] = 0.0
                    continue
                try:
                    value = float(token)
                except ValueError:
                    raise DataError(f"{path}:{lineno}: non-numeric rating {token!r}") from None
                if not lo <= value <= hi:
                    raise DataError(f"{path}:{lineno}: rating {value} outside scale [{lo}, {hi}]")
                ratings[a] = value
            u = users.setdefault(row[0], len(users))
            i = items.setdefault(row[1], len(items))
            if (u, i) in by_pair:
                duplicates += 1
            by_pair[(u, i)] = Observation(u, i, ratings, mask)
        if duplicates:
            warnings.warn(f"{path}: {duplicates} duplicate (user, item) rows, last wins")
    ds = Dataset(
        user_ids=list(users),
        item_ids=list(items),
        aspects=aspects,
        observations=list(by_pair.values()),
        rating_scale=rating_scale,
        duplicate_count=duplicates,
    )
    return _reindex(ds)


def write_dataset(ds: Dataset, path, delimiter: str = "\t",
                  missing_token: str = MISSING_TOKEN) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter=delimiter)
        writer.writerow(["user_id", "item_id", *ds.aspects])
        for obs in ds.observations:
            row = [ds.user_ids[obs.user], ds.item_ids[obs.item]]
            for a in range(ds.n_aspects):
                row.append(repr(float(obs.ratings[a])) if obs.mask[a] else missing_token)
            writer.writerow(row)


def _reindex(ds: Dataset) -> Dataset:
    """Drop unreferenced users/items and renumber densely, keeping id order."""
    used_users = sorted({obs.user for obs in ds.observations})
    used_items = sorted({obs.item for obs in ds.observations})
    umap = {old: new for new, old in enumerate(used_users)}
    imap = {old: new for new, old in enumerate(used_items)}
    return Dataset(
        user_ids=[ds.user_ids[u] for u in used_users],
        item_ids=[ds.item_ids[i] for i in used_items],
        aspects=ds.aspects,
        observations=[Observation(umap[o.user], imap[o.item], o.ratings, o.mask)
                      for o in ds.observations],
        rating_scale=ds.rating_scale,
        duplicate_count=ds.duplicate_count,
    )


def filter_min_observations(ds: Dataset, min_count: int = 5) -> Dataset:
    """Iteratively drop users/items with < min_count observations, to a fixed point."""
    observations = list(ds.observations)
    while True:
        user_counts: dict[int, int] = {}
        item_counts: dict[int, int] = {}
        for obs in observations:
            user_counts[obs.user] = user_counts.get(obs.user, 0) + 1
            item_counts[obs.item] = item_counts.get(obs.item, 0) + 1
        kept = [obs for obs in observations
                if user_counts[obs.user] >= min_count and item_counts[obs.item] >= min_count]
        if len(kept) == len(observations):
            break
        observations = kept
    if not observations:
        raise DataError(f"no observations left after min-count {min_count} filtering")
    return _reindex(Dataset(ds.user_ids, ds.item_ids, ds.aspects, observations,
                            ds.rating_scale, ds.duplicate_count))


def split(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset, int]:
    """Observation-level random split.

    Val/test observations whose user or item never appears in train are
    reassigned to train so evaluation stays well-defined; the count of
    reassignments is returned.
    """
    n = len(ds.observations)
    if n < 3:
        raise DataError("too few observations to split")
    rng = np.random.default_rng(spec.seed)
    order = rng.permutation(n)
    n_train = int(round(spec.train_frac * n))
    n_val = int(round(spec.val_frac * n))
    n_train = max(1, min(n_train, n - 2))
    n_val = max(1, min(n_val, n - n_train - 1))
    buckets = {idx: 0 for idx in order[:n_train]}
    buckets.update({idx: 1 for idx in order[n_train:n_train + n_val]})
    buckets.update({idx: 2 for idx in order[n_train + n_val:]})

    train_users = {ds.observations[idx].user for idx, b in buckets.items() if b == 0}
    train_items = {ds.observations[idx].item for idx, b in buckets.items() if b == 0}
    reassigned = 0
    for idx in sorted(buckets):
        if buckets[idx] == 0:
            continue
        obs = ds.observations[idx]
        if obs.user not in train_users or obs.item not in train_items:
            buckets[idx] = 0
            train_users.add(obs.user)
            train_items.add(obs.item)
            reassigned += 1

    parts: list[list[Observation]] = [[], [], []]
    for idx in range(n):
        parts[buckets[idx]].append(ds.observations[idx])
    if not parts[1] or not parts[2]:
        raise DataError("split produced an empty validation or test part")

    def as_dataset(observations):
        # Keep the parent's full entity index space so splits stay aligned.
        return Dataset(ds.user_ids, ds.item_ids, ds.aspects, observations,
                       ds.rating_scale, ds.duplicate_count)

    return as_dataset(parts[0]), as_dataset(parts[1]), as_dataset(parts[2]), reassigned


@dataclass
class SyntheticConfig:
    m: int = 50
    n: int = 40
    k: int = 4
    d: int = 5
    lam: float = 0.5
    factor_scale: float = 1.0
    cov_scale: float = 0.5
    density: float = 0.3
    discretize: bool = False
    seed: int = 0
    # Optional arrow-structured ground truth: correlation of each non-overall
    # aspect with the overall aspect. Enables controlled-correlation studies.
    overall_correlations: list[float] | None = None
    # Optional full K-by-K true correlation matrix (unit diagonal, PD);
    # takes precedence over overall_correlations.
    base_correlation: list | None = None
    # Common variance multiplier applied to the structured base covariance.
    base_variance: float = 1.0
    # Per-entity covariance perturbation strength around the shared base (arrow mode).
    entity_jitter: float = 0.1
    # When > 0, observation probability grows with the true overall rating
    # (missing-not-at-random), giving rankers a learnable preference signal.
    preference_strength: float = 0.0


@dataclass
class SyntheticTruth:
    U: NDArray
    V: NDArray
    W: NDArray
    sigma_global: NDArray
    sigma_user: list[NDArray]
    sigma_item: list[NDArray]
    pooled_covariance: NDArray = field(default=None)  # type: ignore[assignment]
    pooled_correlation: NDArray = field(default=None)  # type: ignore[assignment]


def _arrow_covariance(correlations: NDArray, k: int) -> NDArray:
    if correlations.shape != (k - 1,):
        raise InvalidInputError("need K - 1 overall correlations")
    if np.sum(correlations ** 2) >= 1.0:
        raise InvalidInputError("squared overall correlations must sum below 1")
    sigma = np.eye(k)
    sigma[0, 1:] = correlations
    sigma[1:, 0] = correlations
    return sigma


def _random_spd(k: int, scale: float, rng: np.random.Generator) -> NDArray:
    a = scale * rng.standard_normal((k, k))
    return a @ a.T + 0.1 * np.eye(k)


def generate_synthetic(cfg: SyntheticConfig) -> tuple[Dataset, SyntheticTruth]:
    """Sample a dataset from the generative model, returning the ground truth."""
    if cfg.density <= 0 or cfg.density > 1:
        raise InvalidInputError("density must lie in (0, 1]")
    if cfg.density * cfg.m * cfg.n < 1:
        raise InvalidInputError("density too low: expected observation count below 1")
    rng = np.random.default_rng(cfg.seed)
    U = cfg.factor_scale * rng.standard_normal((cfg.m, cfg.d))
    V = cfg.factor_scale * rng.standard_normal((cfg.n, cfg.d))
    W = cfg.factor_scale * rng.standard_normal((cfg.k, cfg.d))

    base = None
    if cfg.base_correlation is not None:
        base = np.asarray(cfg.base_correlation, dtype=float)
        if base.shape != (cfg.k, cfg.k) or not np.allclose(base, base.T):
            raise InvalidInputError("base correlation must be a symmetric K-by-K matrix")
        if not np.allclose(np.diag(base), 1.0):
            raise InvalidInputError("base correlation needs a unit diagonal")
        try:
            np.linalg.cholesky(base)
        except np.linalg.LinAlgError:
            raise InvalidInputError("base correlation must be positive definite") from None
    elif cfg.overall_correlations is not None:
        base = _arrow_covariance(np.asarray(cfg.overall_correlations, dtype=float), cfg.k)
    if base is not None:
        if cfg.base_variance <= 0:
            raise InvalidInputError("base variance must be positive")
        base = cfg.base_variance * base
        sigma_global = base.copy()
        sigma_user = [base + _random_spd(cfg.k, cfg.entity_jitter, rng) - 0.1 * np.eye(cfg.k)
                      for _ in range(cfg.m)]
        sigma_item = [base + _random_spd(cfg.k, cfg.entity_jitter, rng) - 0.1 * np.eye(cfg.k)
                      for _ in range(cfg.n)]
    else:
        sigma_global = _random_spd(cfg.k, cfg.cov_scale, rng)
        sigma_user = [_random_spd(cfg.k, cfg.cov_scale, rng) for _ in range(cfg.m)]
        sigma_item = [_random_spd(cfg.k, cfg.cov_scale, rng) for _ in range(cfg.n)]

    means = np.einsum("md,nd,kd->mnk", U, V, W)
    if cfg.preference_strength > 0:
        # Observation probability is a sigmoid of the true overall rating,
        # centered so the expected count matches the requested density. Large
        # strengths approach "only the best pairs get rated".
        target = cfg.density * cfg.m * cfg.n
        overall = means[:, :, 0]

        def expected(threshold: float) -> float:
            return float(np.sum(
                1.0 / (1.0 + np.exp(-cfg.preference_strength * (overall - threshold)))))

        lo, hi = float(overall.min()) - 1.0, float(overall.max()) + 1.0
        for _ in range(100):
            mid = 0.5 * (lo + hi)
            if expected(mid) > target:
                lo = mid
            else:
                hi = mid
        probs = 1.0 / (1.0 + np.exp(-cfg.preference_strength * (overall - 0.5 * (lo + hi))))
        chosen = rng.random((cfg.m, cfg.n)) < probs
        pairs = np.argwhere(chosen)
    else:
        count = int(round(cfg.density * cfg.m * cfg.n))
        flat = rng.choice(cfg.m * cfg.n, size=count, replace=False)
        pairs = np.column_stack([flat // cfg.n, flat % cfg.n])
    if len(pairs) == 0:
        raise InvalidInputError("no observations generated; raise density")

    observations = []
    pooled = np.zeros((cfg.k, cfg.k))
    for u, i in pairs:
        sigma = cfg.lam * sigma_user[u] + (1.0 - cfg.lam) * sigma_item[i]
        pooled += sigma
        chol = np.linalg.cholesky(sigma)
        r = means[u, i] + chol @ rng.standard_normal(cfg.k)
        if cfg.discretize:
            r = np.clip(np.round(r), RATING_MIN, RATING_MAX)
        observations.append(Observation(int(u), int(i), r, np.ones(cfg.k)))
    pooled /= len(pairs)

    scale = (RATING_MIN, RATING_MAX) if cfg.discretize else (-np.inf, np.inf)
    ds = _reindex(Dataset(
        user_ids=[f"u{u}" for u in range(cfg.m)],
        item_ids=[f"i{i}" for i in range(cfg.n)],
        aspects=[f"aspect{a}" if a else "overall" for a in range(cfg.k)],
        observations=observations,
        rating_scale=scale,
    ))
    truth = SyntheticTruth(
        U=U, V=V, W=W,
        sigma_global=sigma_global,
        sigma_user=sigma_user,
        sigma_item=sigma_item,
        pooled_covariance=pooled,
        pooled_correlation=covlinalg.correlation_from_covariance(pooled),
    )
    return ds, truth


def align(ds: Dataset, user_ids: list[str], item_ids: list[str]) -> Dataset:
    """Re-express a dataset in another entity index space (e.g. a model's).

    Every user/item id in the dataset must exist in the target lists.
    """
    umap = {uid: idx for idx, uid in enumerate(user_ids)}
    imap = {iid: idx for idx, iid in enumerate(item_ids)}
    observations = []
    for obs in ds.observations:
        uid = ds.user_ids[obs.user]
        iid = ds.item_ids[obs.item]
        if uid not in umap:
            raise DataError(f"user id {uid!r} not present in the target index space")
        if iid not in imap:
            raise DataError(f"item id {iid!r} not present in the target index space")
        observations.append(Observation(umap[uid], imap[iid], obs.ratings, obs.mask))
    return Dataset(list(user_ids), list(item_ids), ds.aspects, observations,
                   ds.rating_scale, ds.duplicate_count)


def empirical_covariance(ds: Dataset) -> NDArray:
    """Covariance of observed rating vectors (pairwise-complete, jittered)."""
    k = ds.n_aspects
    sums = np.zeros(k)
    counts = np.zeros(k)
    for obs in ds.observations:
        sums += obs.mask * obs.ratings
        counts += obs.mask
    means = np.divide(sums, np.maximum(counts, 1.0))
    cov = np.zeros((k, k))
    pair_counts = np.zeros((k, k))
    for obs in ds.observations:
        centered = obs.mask * (obs.ratings - means)
        cov += np.outer(centered, centered) * np.outer(obs.mask, obs.mask)
        pair_counts += np.outer(obs.mask, obs.mask)
    cov = np.divide(cov, np.maximum(pair_counts - 1.0, 1.0))
    return cov + 1e-6 * np.eye(k)
