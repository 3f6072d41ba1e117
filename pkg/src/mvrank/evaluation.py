"""Ranking and explanation-consistency metrics.

Candidate lists pair each user's held-out test items with random filler
items the user never rated anywhere; NDCG runs over the model's
score-descending order with ascending-item-index tie-breaking so results
are deterministic.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from . import covlinalg
from .data import Dataset
from .errors import InvalidInputError, UndefinedMetricError
from .model import Model, predict_matrix

DEFAULT_LIST_SIZE = 150
DEFAULT_BUCKET_EDGES = (5, 10, 20, 40, 80, 160, 320)
MEC_SELECTORS = ("random", "correlation", "predicted")


@dataclass
class CandidateList:
    user: int
    items: NDArray  # item indices
    gains: NDArray  # relevance gain per item; 0 for fillers


def build_candidates(test: Dataset, observed_pairs: set[tuple[int, int]],
                     n_items: int, rng: np.random.Generator,
                     list_size: int = DEFAULT_LIST_SIZE, aspect: int = 0,
                     binary_gain: bool = False) -> dict[int, CandidateList]:
    """Per-user candidate lists: all test items plus random unobserved fillers."""
    by_user: dict[int, list] = {}
    for obs in test.observations:
        by_user.setdefault(obs.user, []).append(obs)
    lists: dict[int, CandidateList] = {}
    for user in sorted(by_user):
        entries = sorted(by_user[user], key=lambda o: o.item)
        items = [o.item for o in entries]
        gains = []
        for o in entries:
            if o.mask[aspect] == 0.0:
                gains.append(0.0)
            else:
                # Graded gains clamp at zero so NDCG stays well-defined on
                # unbounded rating scales.
                gains.append(1.0 if binary_gain else max(float(o.ratings[aspect]), 0.0))
        user_seen = {i for (u, i) in observed_pairs if u == user}
        pool = np.array([i for i in range(n_items) if i not in user_seen], dtype=int)
        n_fillers = max(0, list_size - len(items))
        if n_fillers > len(pool):
            warnings.warn(f"user {user}: only {len(pool)} fillers available, "
                          f"list shorter than {list_size}")
            n_fillers = len(pool)
        if n_fillers:
            fillers = rng.choice(pool, size=n_fillers, replace=False)
            items = items + [int(i) for i in fillers]
            gains = gains + [0.0] * n_fillers
        lists[user] = CandidateList(user=user, items=np.array(items, dtype=int),
                                    gains=np.array(gains, dtype=float))
    return lists


def ndcg_at_k(candidates: CandidateList, scores: NDArray, k: int) -> float:
    """NDCG of the score-descending order at cutoff k; zero-gain users score 0."""
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    gains = candidates.gains
    if not np.any(gains > 0.0):
        return 0.0
    order = np.lexsort((candidates.items, -np.asarray(scores, dtype=float)))
    discounts = 1.0 / np.log2(np.arange(2, k + 2))
    top = gains[order][:k]
    dcg = float(np.sum(top * discounts[:len(top)]))
    ideal = np.sort(gains)[::-1][:k]
    idcg = float(np.sum(ideal * discounts[:len(ideal)]))
    return dcg / idcg


@dataclass
class PairPrediction:
    """One test pair's observed/predicted ratings and aspect-correlation info."""

    user: int
    item: int
    observed: NDArray
    mask: NDArray
    predicted: NDArray
    overall_correlation: NDArray  # |corr| of each aspect with the overall aspect


def pair_predictions(model: Model, test: Dataset) -> list[PairPrediction]:
    out = []
    cache: dict[tuple[bool, int, bool, int], NDArray] = {}
    for obs in test.observations:
        key = (obs.user in model.cov.l_user, obs.user,
               obs.item in model.cov.l_item, obs.item)
        corr = cache.get(key)
        if corr is None:
            sigma = covlinalg.compose_pair_covariance(
                model.cov.sigma_user(obs.user), model.cov.sigma_item(obs.item),
                model.hp.lam)
            corr = np.abs(covlinalg.correlation_from_covariance(sigma)[0])
            cache[key] = corr
        pred = (model.factors.U[obs.user] * model.factors.V[obs.item]) @ model.factors.W.T
        out.append(PairPrediction(obs.user, obs.item, obs.ratings, obs.mask,
                                  pred, corr))
    return out


def mec(pairs: list[PairPrediction], selector: str,
        rng: np.random.Generator | None = None) -> tuple[float, int, int]:
    """Pearson correlation of overall-rating errors vs selected-aspect errors.

    Returns (value, n_used, n_skipped); pairs whose selected aspect (or the
    overall rating) is unobserved are skipped and counted.
    """
    if selector not in MEC_SELECTORS:
        raise InvalidInputError(f"unknown aspect selector {selector!r}")
    if selector == "random" and rng is None:
        raise InvalidInputError("random selector needs an RNG")
    overall_err = []
    aspect_err = []
    skipped = 0
    for pair in pairs:
        k = pair.observed.shape[0]
        if k < 2 or pair.mask[0] == 0.0:
            skipped += 1
            continue
        if selector == "random":
            aspect = 1 + int(rng.integers(k - 1))
        elif selector == "correlation":
            aspect = 1 + int(np.argmax(pair.overall_correlation[1:]))
        else:
            aspect = 1 + int(np.argmax(pair.predicted[1:]))
        if pair.mask[aspect] == 0.0:
            skipped += 1
            continue
        overall_err.append(float(pair.predicted[0] - pair.observed[0]))
        aspect_err.append(float(pair.predicted[aspect] - pair.observed[aspect]))
    if len(overall_err) < 2:
        raise UndefinedMetricError("need at least 2 usable test pairs")
    e = np.array(overall_err)
    s = np.array(aspect_err)
    if np.var(e) == 0.0 or np.var(s) == 0.0:
        raise UndefinedMetricError("zero variance in an error series")
    value = float(np.corrcoef(e, s)[0, 1])
    return value, len(overall_err), skipped


def group_by_activity(user_metrics: dict[int, float], train_counts: NDArray,
                      bucket_edges=DEFAULT_BUCKET_EDGES) -> list[dict]:
    """Bucketed mean metric by training-observation count per user."""
    edges = list(bucket_edges)
    if any(b <= a for a, b in zip(edges, edges[1:])):
        raise InvalidInputError("bucket edges must be strictly increasing")
    bounds = [(0, edges[0])] + list(zip(edges, edges[1:])) + [(edges[-1], np.inf)]
    rows = []
    for lo, hi in bounds:
        members = [m for u, m in user_metrics.items() if lo <= train_counts[u] < hi]
        rows.append({
            "bucket_lo": lo,
            "bucket_hi": hi,
            "n_users": len(members),
            "ndcg": float(np.mean(members)) if members else None,
        })
    return rows


def evaluate_ranking(model: Model, candidates: dict[int, CandidateList],
                     ks, aspect: int = 0) -> tuple[dict[int, float], dict[int, dict[int, float]]]:
    """Mean NDCG@k per cutoff plus the per-user values at the largest cutoff."""
    per_user: dict[int, dict[int, float]] = {}
    for user, cand in candidates.items():
        scores = predict_matrix(model.factors, user)[cand.items, aspect]
        per_user[user] = {k: ndcg_at_k(cand, scores, k) for k in ks}
    means = {k: float(np.mean([vals[k] for vals in per_user.values()])) for k in ks}
    return means, per_user
