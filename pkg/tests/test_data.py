import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ztafl.data import (
    Dataset,
    PartitionSpec,
    active_features,
    generate_synthetic,
    load_csv,
    minmax_normalize,
    partition_noniid,
    power_law_sizes,
    split,
    write_csv,
)
from ztafl.errors import InvalidInputError, ShapeError


def test_synthetic_shape_balance_and_means():
    ds = generate_synthetic(6000, 40, 6, seed=1)
    assert ds.X.shape == (6000, 40)
    assert list(ds.class_counts()) == [1000] * 6
    for c in range(6):
        blk = active_features(c, 40, 6)
        mu = ds.X[ds.y == c].mean(0)
        np.testing.assert_allclose(mu[blk], 2.0, atol=0.15)
        rest = np.setdiff1d(np.arange(40), blk)
        np.testing.assert_allclose(mu[rest], 0.0, atol=0.15)
    assert generate_synthetic(100, 8, 2, seed=9).X.tobytes() == generate_synthetic(100, 8, 2, seed=9).X.tobytes()


@given(st.integers(60, 400), st.integers(2, 5), st.integers(0, 10_000))
def test_split_stratified_and_disjoint(n, C, seed):
    ds = generate_synthetic(n, 6, C, seed=seed)
    ds = Dataset(ds.X, ds.y, ds.class_names)
    parts = split(ds, (0.7, 0.15, 0.15), seed=seed)
    sizes = [len(p) for p in parts]
    assert sum(sizes) == n
    for target, got in zip((0.7, 0.15, 0.15), sizes):
        assert abs(got - target * n) <= 1.0 + 1e-9
    for c in range(C):
        nc = int((ds.y == c).sum())
        for frac, p in zip((0.7, 0.15, 0.15), parts):
            assert abs(int((p.y == c).sum()) - frac * nc) < 1.0 + 1e-9
    # disjointness via the row bytes
    rows = [set(map(bytes, p.X)) for p in parts]
    assert not (rows[0] & rows[1]) and not (rows[0] & rows[2]) and not (rows[1] & rows[2])


def test_split_rejects_tiny_classes():
    ds = Dataset(np.zeros((5, 2)), np.array([0, 0, 0, 1, 1]))
    with pytest.raises(InvalidInputError):
        split(ds)


def test_minmax_fitted_on_train_only():
    tr = Dataset(np.array([[0.0, 5.0], [2.0, 5.0]]), np.array([0, 1]))
    te = Dataset(np.array([[4.0, 7.0]]), np.array([0]))
    (a, b), bounds = minmax_normalize(tr, te)
    np.testing.assert_allclose(a.X, [[0, 0], [1, 0]])
    # no clipping for out-of-range test values; zero-range feature maps to 0
    np.testing.assert_allclose(b.X, [[2.0, 0.0]])
    np.testing.assert_allclose(bounds.lo, [0, 5])


@given(st.integers(1, 200), st.floats(1.01, 3.0), st.integers(0, 1000))
def test_power_law_sizes_in_bounds(n, a, seed):
    s = power_law_sizes(n, a, 50, 500, np.random.default_rng(seed))
    assert s.min() >= 50 and s.max() <= 500


def test_power_law_tail_decreasing():
    s = power_law_sizes(20000, 1.5, 50, 500, np.random.default_rng(0))
    h, _ = np.histogram(s, bins=[50, 100, 200, 300, 500])
    assert h[0] > h[1] > h[2]


def test_partition_label_skew_and_holdout(small_data):
    tr, _, _ = small_data
    spec = PartitionSpec(8, classes_per_agent=2, min_size=30, max_size=80)
    shards = partition_noniid(tr, spec, seed=2)
    assert [s.agent_id for s in shards] == list(range(8))
    for s in shards:
        assert len(s.classes) == 2
        assert set(np.unique(s.train.y)) <= set(s.classes)
        assert 30 <= s.size <= 80
        assert abs(len(s.holdout) - 0.1 * s.size) <= 1
    again = partition_noniid(tr, spec, seed=2)
    assert all(np.array_equal(a.indices, b.indices) for a, b in zip(shards, again))
    # without resampling, shards never share a training row
    if not any(s.resampled for s in shards):
        idx = np.concatenate([s.indices for s in shards])
        assert len(np.unique(idx)) == len(idx)


def test_partition_feature_skew(small_data):
    tr, _, _ = small_data
    spec = PartitionSpec(4, 2, min_size=30, max_size=60, feature_skew_groups=((0, 1, 2), (3, 4)))
    shards = partition_noniid(tr, spec, seed=0)
    assert np.all(shards[0].train.X[:, 3:] == 0)
    assert np.all(shards[1].train.X[:, [0, 1, 2]] == 0)


def test_partition_errors(small_data):
    tr, _, _ = small_data
    with pytest.raises(InvalidInputError):
        partition_noniid(tr, PartitionSpec(4, classes_per_agent=9), seed=0)
    with pytest.raises(InvalidInputError):
        partition_noniid(tr, PartitionSpec(100, min_size=400, max_size=500), seed=0)


def test_csv_roundtrip_and_errors(tmp_path):
    ds = Dataset(np.array([[0.5, 1.0], [2.0, -1.0], [0.25, 0.125]]), np.array([1, 0, 1]), ["a", "b"])
    p = tmp_path / "d.csv"
    write_csv(ds, p)
    back = load_csv(p, "label")
    np.testing.assert_array_equal(back.X, ds.X)
    np.testing.assert_array_equal(back.y, ds.y)
    bad = tmp_path / "bad.csv"
    bad.write_text("f0,label\n1.0,a\nxyz,b\n")
    with pytest.raises(InvalidInputError, match="row 2"):
        load_csv(bad, "label")
    with pytest.raises(InvalidInputError):
        load_csv(p, "nope")
    with pytest.raises(FileNotFoundError):
        load_csv(tmp_path / "missing.csv", "label")


def test_dataset_shape_checks():
    with pytest.raises(ShapeError):
        Dataset(np.zeros((3, 2)), np.zeros(2))
