"""NDCG, MEC and activity-bucket reports."""

import numpy as np
import pytest

from mvrank.errors import InvalidInputError, UndefinedMetricError
from mvrank.evaluation import (CandidateList, PairPrediction, build_candidates,
                               group_by_activity, mec, ndcg_at_k)
from mvrank.data import Dataset, Observation


def cand(items, gains):
    return CandidateList(user=0, items=np.array(items), gains=np.array(gains, dtype=float))


def test_ndcg_perfect_ranking_is_one():
    c = cand([0, 1, 2, 3], [3.0, 2.0, 1.0, 0.0])
    scores = np.array([4.0, 3.0, 2.0, 1.0])
    assert ndcg_at_k(c, scores, 4) == pytest.approx(1.0)


def test_ndcg_hand_computed_oracle():
    # Ranking by score puts gains in order [0, 3, 2]; ideal order is [3, 2, 0].
    c = cand([0, 1, 2], [3.0, 0.0, 2.0])
    scores = np.array([5.0, 9.0, 1.0])
    dcg = 0.0 / np.log2(2) + 3.0 / np.log2(3) + 2.0 / np.log2(4)
    idcg = 3.0 / np.log2(2) + 2.0 / np.log2(3) + 0.0
    assert ndcg_at_k(c, scores, 3) == pytest.approx(dcg / idcg, rel=1e-12)


def test_ndcg_cutoff_truncates():
    c = cand([0, 1], [0.0, 1.0])
    scores = np.array([2.0, 1.0])  # relevant item ranked second
    assert ndcg_at_k(c, scores, 1) == 0.0
    assert ndcg_at_k(c, scores, 2) == pytest.approx(1.0 / np.log2(3), rel=1e-12)


def test_ndcg_ties_break_by_ascending_item_index():
    c = cand([5, 2, 9], [0.0, 0.0, 1.0])
    scores = np.zeros(3)  # all tied: order is item 2, 5, 9
    expected = (1.0 / np.log2(4)) / (1.0 / np.log2(2))
    assert ndcg_at_k(c, scores, 3) == pytest.approx(expected, rel=1e-12)


def test_ndcg_zero_gain_user_scores_zero():
    c = cand([0, 1], [0.0, 0.0])
    assert ndcg_at_k(c, np.array([1.0, 2.0]), 2) == 0.0


def test_ndcg_rejects_bad_cutoff():
    with pytest.raises(InvalidInputError):
        ndcg_at_k(cand([0], [1.0]), np.array([1.0]), 0)


def make_test_split():
    observations = [Observation(0, 0, np.array([4.0, 2.0]), np.ones(2)),
                    Observation(0, 1, np.array([-1.0, 3.0]), np.ones(2)),
                    Observation(1, 2, np.array([5.0, 1.0]), np.array([1.0, 0.0]))]
    return Dataset(["u0", "u1"], [f"i{j}" for j in range(10)],
                   ["overall", "value"], observations,
                   rating_scale=(-np.inf, np.inf))


def test_build_candidates_excludes_observed_fillers():
    test = make_test_split()
    observed = {(0, 0), (0, 1), (0, 5), (1, 2), (1, 7)}
    rng = np.random.default_rng(0)
    lists = build_candidates(test, observed, n_items=10, rng=rng, list_size=6)
    c0 = lists[0]
    assert len(c0.items) == 6
    assert set(c0.items[:2]) == {0, 1}
    assert 5 not in c0.items[2:]
    assert c0.gains[0] == 4.0
    assert c0.gains[1] == 0.0  # negative graded gain clamps to zero
    c1 = lists[1]
    assert 7 not in c1.items[1:]


def test_build_candidates_binary_gains():
    test = make_test_split()
    rng = np.random.default_rng(0)
    lists = build_candidates(test, {(0, 0), (0, 1), (1, 2)}, 10, rng,
                             list_size=5, binary_gain=True)
    np.testing.assert_array_equal(lists[0].gains[:2], [1.0, 1.0])
    assert np.all(lists[0].gains[2:] == 0.0)


def test_build_candidates_masked_aspect_gain_is_zero():
    test = make_test_split()
    rng = np.random.default_rng(0)
    lists = build_candidates(test, {(0, 0), (0, 1), (1, 2)}, 10, rng,
                             list_size=5, aspect=1)
    assert lists[1].gains[0] == 0.0  # aspect 1 unobserved for user 1's test item


def test_build_candidates_warns_when_pool_short():
    test = make_test_split()
    rng = np.random.default_rng(0)
    with pytest.warns(UserWarning, match="fillers"):
        lists = build_candidates(test, {(0, 0), (0, 1), (1, 2)}, 10, rng,
                                 list_size=50)
    assert len(lists[0].items) == 10


def pair(pred, obs, mask=None, corr=(1.0, 0.9, 0.2)):
    k = len(pred)
    return PairPrediction(0, 0, np.array(obs, dtype=float),
                          np.ones(k) if mask is None else np.array(mask, dtype=float),
                          np.array(pred, dtype=float), np.array(corr))


def test_mec_perfectly_correlated_errors():
    rng = np.random.default_rng(1)
    pairs = []
    for _ in range(40):
        e = rng.standard_normal()
        pairs.append(pair([e, e, 0.0], [0.0, 0.0, 0.0]))
    value, n_used, n_skipped = mec(pairs, "correlation")
    assert value == pytest.approx(1.0)
    assert n_used == 40 and n_skipped == 0


def test_mec_correlation_selector_picks_highest_correlation_aspect():
    rng = np.random.default_rng(2)
    pairs = []
    for _ in range(60):
        e = rng.standard_normal()
        # Aspect 1 errors equal the overall error; aspect 2 errors are noise.
        pairs.append(pair([e, e, rng.standard_normal()], [0.0, 0.0, 0.0],
                          corr=(1.0, 0.9, 0.2)))
    corr_val, _, _ = mec(pairs, "correlation")
    rand_val, _, _ = mec(pairs, "random", np.random.default_rng(3))
    assert corr_val == pytest.approx(1.0)
    assert rand_val < corr_val


def test_mec_skips_pairs_missing_selected_aspect():
    pairs = [pair([1.0, 2.0, 0.5], [0.0, 0.0, 0.0]) for _ in range(5)]
    pairs[0] = pair([1.0, 2.0, 0.5], [0.0, 0.0, 0.0], mask=[1, 0, 1])
    pairs[1] = pair([1.0, 2.0, 0.5], [0.0, 0.0, 0.0], mask=[0, 1, 1])
    # Force distinct errors so the metric is defined.
    usable = [pair([float(i), float(i) * 2.0, 0.5], [0.0, 0.0, 0.0])
              for i in range(4)]
    value, n_used, n_skipped = mec(pairs[:2] + usable, "correlation")
    assert n_skipped == 2
    assert n_used == 4


def test_mec_undefined_on_constant_errors():
    pairs = [pair([1.0, 1.0, 1.0], [0.0, 0.0, 0.0]) for _ in range(10)]
    with pytest.raises(UndefinedMetricError):
        mec(pairs, "correlation")


def test_mec_rejects_unknown_selector():
    with pytest.raises(InvalidInputError):
        mec([], "best")


def test_mec_random_requires_rng():
    with pytest.raises(InvalidInputError):
        mec([], "random")


def test_group_by_activity_buckets():
    user_metrics = {0: 0.2, 1: 0.4, 2: 0.6, 3: 0.8}
    counts = np.array([3, 7, 7, 500])
    rows = group_by_activity(user_metrics, counts, bucket_edges=(5, 10))
    assert [(r["bucket_lo"], r["bucket_hi"]) for r in rows] == \
        [(0, 5), (5, 10), (10, np.inf)]
    assert rows[0]["n_users"] == 1 and rows[0]["ndcg"] == pytest.approx(0.2)
    assert rows[1]["n_users"] == 2 and rows[1]["ndcg"] == pytest.approx(0.5)
    assert rows[2]["n_users"] == 1 and rows[2]["ndcg"] == pytest.approx(0.8)


def test_group_by_activity_empty_bucket_has_no_value():
    rows = group_by_activity({0: 1.0}, np.array([100]), bucket_edges=(5, 10))
    assert rows[0]["n_users"] == 0 and rows[0]["ndcg"] is None


def test_group_by_activity_rejects_unsorted_edges():
    with pytest.raises(InvalidInputError):
        group_by_activity({}, np.array([]), bucket_edges=(10, 5))
