import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedad.partition import (
    PartitionSpec,
    dirichlet_partition,
    fraction_partition,
    holdout_validation,
    max_class_share,
)


def test_single_node_gets_everything(rng):
    labels = rng.integers(0, 5, 200)
    spec = dirichlet_partition(labels, 1, 0.3, seed=0)
    assert spec.assignments[0] == list(range(200))
    assert spec.class_counts[0] == np.bincount(labels, minlength=5).tolist()


def test_determinism_bitwise(rng):
    labels = rng.integers(0, 10, 500)
    a = dirichlet_partition(labels, 4, 0.5, seed=123)
    b = dirichlet_partition(labels, 4, 0.5, seed=123)
    assert a.to_dict() == b.to_dict()
    c = dirichlet_partition(labels, 4, 0.5, seed=124)
    assert c.to_dict() != a.to_dict()


@settings(max_examples=30, deadline=None)
@given(
    labels=st.lists(st.integers(0, 6), min_size=8, max_size=120),
    k=st.integers(1, 5),
    alpha=st.floats(0.05, 50.0),
)
def test_partition_invariants(labels, k, alpha):
    labels = np.asarray(labels)
    if k > len(labels):
        k = len(labels)
    spec = dirichlet_partition(labels, k, alpha, seed=7)
    flat = sorted(i for a in spec.assignments for i in a)
    assert flat == list(range(len(labels)))  # set partition, no duplicates
    counts = np.asarray(spec.class_counts)
    assert counts.sum(axis=1).tolist() == spec.node_sizes
    assert counts.sum(axis=0).tolist() == np.bincount(labels, minlength=counts.shape[1]).tolist()
    assert all(len(a) >= 1 for a in spec.assignments)


def test_high_alpha_approaches_uniform_split():
    # Monte-Carlo over seeds against the analytic Dirichlet mean of 1/K
    k, n = 5, 10_000
    labels = np.random.default_rng(1).integers(0, 10, n)
    global_counts = np.bincount(labels, minlength=10)
    devs = []
    for seed in range(100):
        spec = dirichlet_partition(labels, k, 1e4, seed=seed)
        counts = np.asarray(spec.class_counts, dtype=float)
        props = counts / global_counts
        devs.append(np.abs(props - 1 / k).mean())
    assert np.mean(devs) < 0.02


def test_low_alpha_more_non_iid_than_alpha_one():
    labels = np.random.default_rng(2).integers(0, 10, 2000)
    share_01 = np.mean([max_class_share(dirichlet_partition(labels, 5, 0.1, s)) for s in range(100)])
    share_1 = np.mean([max_class_share(dirichlet_partition(labels, 5, 1.0, s)) for s in range(100)])
    assert share_01 > share_1


def test_backfill_keeps_every_node_nonempty():
    labels = np.zeros(12, dtype=int)
    spec = dirichlet_partition(labels, 6, 0.01, seed=3)
    assert all(len(a) >= 1 for a in spec.assignments)
    assert sorted(i for a in spec.assignments for i in a) == list(range(12))


def test_rejects_bad_inputs():
    with pytest.raises(ValueError):
        dirichlet_partition([], 2, 1.0, 0)
    with pytest.raises(ValueError):
        dirichlet_partition([0, 1, 2], 5, 1.0, 0)
    with pytest.raises(ValueError):
        dirichlet_partition([0, 1], 2, 0.0, 0)
    with pytest.raises(ValueError):
        dirichlet_partition([0, 1], 0, 1.0, 0)


def test_spec_json_roundtrip(tmp_path, rng):
    labels = rng.integers(0, 3, 50)
    spec = dirichlet_partition(labels, 3, 0.7, seed=9)
    path = tmp_path / "partition.json"
    spec.save(path)
    doc = json.loads(path.read_text())
    assert set(doc) >= {"K", "alpha", "seed", "assignments", "class_counts"}
    again = PartitionSpec.load(path)
    assert again.to_dict() == spec.to_dict()


def test_validate_catches_overlap():
    spec = PartitionSpec(2, 1.0, 0, [[0, 1], [1, 2]], [[2, 0], [2, 0]])
    with pytest.raises(ValueError, match="overlap"):
        spec.validate()


# -- holdout ---------------------------------------------------------------


def test_holdout_ninety_ten():
    train, val = holdout_validation(np.arange(100), 0.1, seed=0)
    assert len(val) == 10 and len(train) == 90
    assert set(train).isdisjoint(val)
    assert sorted(set(train) | set(val)) == list(range(100))


def test_holdout_deterministic():
    a = holdout_validation(np.arange(10), 0.5, seed=5)
    b = holdout_validation(np.arange(10), 0.5, seed=5)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_holdout_degenerate_rounding_rejected():
    with pytest.raises(ValueError, match="empty validation"):
        holdout_validation(np.arange(3), 0.1, seed=0)


@pytest.mark.parametrize("fraction", [0.0, 1.0, -0.2, 1.5])
def test_holdout_fraction_out_of_range(fraction):
    with pytest.raises(ValueError):
        holdout_validation(np.arange(10), fraction, seed=0)


# -- fraction partition ------------------------------------------------------


def test_fraction_partition_sizes():
    spec = fraction_partition(100, [0.6, 0.3, 0.1], seed=0)
    assert spec.node_sizes == [60, 30, 10]
    assert spec.class_counts == [[60], [30], [10]]
    assert sorted(i for a in spec.assignments for i in a) == list(range(100))


def test_fraction_partition_deterministic():
    a = fraction_partition(57, [1, 2, 3], seed=4)
    b = fraction_partition(57, [1, 2, 3], seed=4)
    assert a.to_dict() == b.to_dict()


def test_fraction_partition_rejects_bad_fractions():
    with pytest.raises(ValueError):
        fraction_partition(10, [0.5, -0.5], seed=0)
    with pytest.raises(ValueError):
        fraction_partition(2, [1, 1, 1], seed=0)
