"""Ingestion, filtering, splitting and the synthetic generator."""

import numpy as np
import pytest

from mvrank import covlinalg, data
from mvrank.data import (Dataset, Observation, SplitSpec, SyntheticConfig, align,
                         empirical_covariance, filter_min_observations,
                         generate_synthetic, ingest, split, write_dataset)
from mvrank.errors import DataError, InvalidInputError


def write_tsv(path, rows, header="user_id\titem_id\toverall\tvalue"):
    path.write_text("\n".join([header] + rows) + "\n")


def test_ingest_basic(tmp_path):
    path = tmp_path / "r.tsv"
    write_tsv(path, ["u1\ti1\t4\t3", "u1\ti2\t2\tNA", "u2\ti1\t5\t5"])
    ds = ingest(path)
    assert ds.aspects == ["overall", "value"]
    assert ds.n_users == 2 and ds.n_items == 2
    assert len(ds.observations) == 3
    by_pair = {(o.user, o.item): o for o in ds.observations}
    masked = by_pair[(0, 1)]
    assert masked.mask.tolist() == [1.0, 0.0]
    assert masked.ratings[0] == 2.0


def test_ingest_rejects_bad_rows_with_line_numbers(tmp_path):
    path = tmp_path / "r.tsv"
    write_tsv(path, ["u1\ti1\t4\t3", "u1\ti2\tbanana\t1"])
    with pytest.raises(DataError, match=":3:"):
        ingest(path)


def test_ingest_rejects_out_of_scale_ratings(tmp_path):
    path = tmp_path / "r.tsv"
    write_tsv(path, ["u1\ti1\t9\t3"])
    with pytest.raises(DataError, match="outside scale"):
        ingest(path)


def test_ingest_rejects_column_count_mismatch(tmp_path):
    path = tmp_path / "r.tsv"
    write_tsv(path, ["u1\ti1\t4"])
    with pytest.raises(DataError, match=":2:"):
        ingest(path)


def test_ingest_empty_file(tmp_path):
    path = tmp_path / "r.tsv"
    path.write_text("")
    with pytest.raises(DataError, match="empty"):
        ingest(path)


def test_ingest_duplicates_last_wins(tmp_path):
    path = tmp_path / "r.tsv"
    write_tsv(path, ["u1\ti1\t4\t3", "u1\ti1\t2\t2"])
    with pytest.warns(UserWarning, match="duplicate"):
        ds = ingest(path)
    assert len(ds.observations) == 1
    assert ds.observations[0].ratings[0] == 2.0
    assert ds.duplicate_count == 1


def test_write_then_ingest_roundtrip(tmp_path):
    path = tmp_path / "r.tsv"
    write_tsv(path, ["u1\ti1\t4\t3", "u1\ti2\t2\tNA", "u2\ti1\t5\t5"])
    ds = ingest(path)
    out = tmp_path / "w.tsv"
    write_dataset(ds, out)
    back = ingest(out)
    assert back.user_ids == ds.user_ids
    assert back.item_ids == ds.item_ids
    for a, b in zip(ds.observations, back.observations):
        assert (a.user, a.item) == (b.user, b.item)
        np.testing.assert_array_equal(a.ratings * a.mask, b.ratings * b.mask)
        np.testing.assert_array_equal(a.mask, b.mask)


def grid_dataset(m=6, n=6):
    """Fully observed grid with deterministic in-scale ratings."""
    observations = [Observation(u, i, np.array([1.0 + (u + i) % 5, 1.0 + (u * i) % 5]),
                                np.ones(2))
                    for u in range(m) for i in range(n)]
    return Dataset([f"u{j}" for j in range(m)], [f"i{j}" for j in range(n)],
                   ["overall", "value"], observations)


def test_filter_reaches_fixed_point():
    # u0 has 2 observations; dropping it leaves i9 with 1 observation, which
    # must also be dropped on the next pass.
    observations = [Observation(0, 8, np.ones(1), np.ones(1)),
                    Observation(0, 9, np.ones(1), np.ones(1)),
                    Observation(1, 9, np.ones(1), np.ones(1))]
    for u in (1, 2, 3):
        for i in (0, 1, 2):
            observations.append(Observation(u, i, np.ones(1), np.ones(1)))
    ds = Dataset([f"u{j}" for j in range(4)], [f"i{j}" for j in range(10)],
                 ["overall"], observations)
    kept = filter_min_observations(ds, min_count=3)
    assert kept.n_users == 3 and kept.n_items == 3
    assert len(kept.observations) == 9
    assert all(c >= 3 for c in kept.user_observation_counts())
    assert all(c >= 3 for c in kept.item_observation_counts())


def test_filter_rejects_emptying_dataset():
    ds = Dataset(["u0"], ["i0"], ["overall"],
                 [Observation(0, 0, np.ones(1), np.ones(1))])
    with pytest.raises(DataError):
        filter_min_observations(ds, min_count=5)


def test_split_is_deterministic_and_partitions():
    ds = grid_dataset()
    spec = SplitSpec(seed=11)
    a = split(ds, spec)
    b = split(ds, spec)
    for part_a, part_b in zip(a[:3], b[:3]):
        assert [(o.user, o.item) for o in part_a.observations] == \
               [(o.user, o.item) for o in part_b.observations]
    train, val, test, _ = a
    total = len(train.observations) + len(val.observations) + len(test.observations)
    assert total == len(ds.observations)
    pairs = {(o.user, o.item) for part in (train, val, test)
             for o in part.observations}
    assert len(pairs) == total


def test_split_keeps_eval_entities_in_train():
    ds = grid_dataset()
    train, val, test, _ = split(ds, SplitSpec(seed=3))
    train_users = {o.user for o in train.observations}
    train_items = {o.item for o in train.observations}
    for part in (val, test):
        for o in part.observations:
            assert o.user in train_users and o.item in train_items


def test_split_fraction_validation():
    with pytest.raises(InvalidInputError):
        SplitSpec(0.5, 0.1, 0.1)
    with pytest.raises(InvalidInputError):
        SplitSpec(1.0, -0.1, 0.1)


def test_align_remaps_to_target_space():
    ds = grid_dataset(m=3, n=3)
    train, val, test, _ = split(ds, SplitSpec(0.5, 0.25, 0.25, seed=0))
    sub = Dataset(["u1", "u2"], ["i0", "i2"], ds.aspects,
                  [Observation(1, 0, np.ones(2), np.ones(2))])
    back = align(sub, ds.user_ids, ds.item_ids)
    assert back.observations[0].user == 2  # "u2" in the full space
    assert back.observations[0].item == 0


def test_align_rejects_unknown_ids():
    sub = Dataset(["ux"], ["i0"], ["overall"],
                  [Observation(0, 0, np.ones(1), np.ones(1))])
    with pytest.raises(DataError):
        align(sub, ["u0"], ["i0"])


def test_synthetic_is_seed_deterministic():
    cfg = SyntheticConfig(m=10, n=8, k=3, d=2, density=0.5, seed=5)
    ds1, t1 = generate_synthetic(cfg)
    ds2, t2 = generate_synthetic(cfg)
    assert len(ds1.observations) == len(ds2.observations)
    for a, b in zip(ds1.observations, ds2.observations):
        np.testing.assert_array_equal(a.ratings, b.ratings)
    np.testing.assert_array_equal(t1.U, t2.U)


def test_synthetic_discretize_respects_scale():
    cfg = SyntheticConfig(m=10, n=8, k=2, d=2, density=0.5, seed=1, discretize=True)
    ds, _ = generate_synthetic(cfg)
    for obs in ds.observations:
        assert np.all(obs.ratings >= 1.0) and np.all(obs.ratings <= 5.0)
        np.testing.assert_array_equal(obs.ratings, np.round(obs.ratings))


def test_synthetic_base_correlation_used_as_truth():
    rho = [[1.0, 0.7], [0.7, 1.0]]
    cfg = SyntheticConfig(m=8, n=8, k=2, d=2, density=0.5, seed=2,
                          base_correlation=rho, base_variance=2.0,
                          entity_jitter=0.0)
    _, truth = generate_synthetic(cfg)
    np.testing.assert_allclose(truth.sigma_global, 2.0 * np.array(rho))
    np.testing.assert_allclose(truth.pooled_correlation, rho, atol=1e-9)


def test_synthetic_rejects_bad_base_correlation():
    with pytest.raises(InvalidInputError):
        generate_synthetic(SyntheticConfig(k=2, base_correlation=[[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(InvalidInputError):
        generate_synthetic(SyntheticConfig(k=2, base_correlation=[[2.0, 0.0], [0.0, 2.0]]))


def test_synthetic_preference_strength_skews_observed_means():
    """Observed pairs should have higher true overall ratings than the grid average."""
    cfg = SyntheticConfig(m=30, n=30, k=2, d=3, density=0.2, seed=3,
                          preference_strength=6.0)
    ds, truth = generate_synthetic(cfg)
    means = np.einsum("md,nd,kd->mnk", truth.U, truth.V, truth.W)[:, :, 0]
    observed_means = [means[int(ds.user_ids[o.user][1:]), int(ds.item_ids[o.item][1:])]
                      for o in ds.observations]
    assert np.mean(observed_means) > np.mean(means) + 0.5


def test_empirical_covariance_recovers_pooled_truth():
    cfg = SyntheticConfig(m=30, n=30, k=3, d=2, factor_scale=0.1,
                          density=0.9, seed=4)
    ds, truth = generate_synthetic(cfg)
    # With nearly flat means the rating covariance is the pooled noise covariance.
    emp = empirical_covariance(ds)
    corr_emp = covlinalg.correlation_from_covariance(emp)
    np.testing.assert_allclose(corr_emp, truth.pooled_correlation, atol=0.15)


def test_empirical_covariance_handles_masks():
    observations = [Observation(0, 0, np.array([1.0, 0.0]), np.array([1.0, 0.0])),
                    Observation(0, 1, np.array([2.0, 0.0]), np.array([1.0, 0.0])),
                    Observation(1, 0, np.array([3.0, 4.0]), np.ones(2))]
    ds = Dataset(["u0", "u1"], ["i0", "i1"], ["a", "b"], observations)
    cov = empirical_covariance(ds)
    assert cov.shape == (2, 2)
    assert np.all(np.isfinite(cov))
