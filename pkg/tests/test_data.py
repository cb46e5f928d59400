"""Population construction, synthetic generators, and jsonl interchange."""

import numpy as np
import pytest

from tailfed import (
    DeviceShard,
    Population,
    gen_gaussian_mixture,
    gen_hetero_logistic,
    load_devices_jsonl,
    save_devices_jsonl,
    split_devices,
    weights_by_count,
)


def test_shard_validation():
    with pytest.raises(ValueError):
        DeviceShard("a", np.zeros((0, 2)), np.zeros(0))
    with pytest.raises(ValueError):
        DeviceShard("a", np.zeros((2, 2)), np.zeros(3))
    with pytest.raises(ValueError):
        DeviceShard("a", np.zeros((2, 2)), np.zeros(2), weight=0.0)


def test_population_normalizes_weights():
    shards = [
        DeviceShard("a", np.zeros((1, 2)), np.zeros(1), weight=2.0),
        DeviceShard("b", np.zeros((3, 2)), np.zeros(3), weight=6.0),
    ]
    pop = Population(shards)
    assert pop.weights == pytest.approx([0.25, 0.75])
    assert pop.feature_dim == 2


def test_population_rejects_mixed_dims():
    shards = [
        DeviceShard("a", np.zeros((1, 2)), np.zeros(1)),
        DeviceShard("b", np.zeros((1, 3)), np.zeros(1)),
    ]
    with pytest.raises(ValueError):
        Population(shards)


def test_weights_by_count():
    shards = [
        DeviceShard("a", np.zeros((2, 2)), np.array([1, -1])),
        DeviceShard("b", np.zeros((6, 2)), np.array([1, -1, 1, -1, 1, -1])),
    ]
    pop = weights_by_count(shards)
    assert pop.weights == pytest.approx([0.25, 0.75])
    assert pop.num_classes == 2


def test_shard_examples_view():
    shard = DeviceShard("a", np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([1, -1]))
    exs = shard.examples
    assert len(exs) == 2
    assert exs[1].y == -1
    assert np.allclose(exs[1].x, [3.0, 4.0])


# ---------------------------------------------------------------------------
# generators


def test_gaussian_mixture_layout_and_determinism():
    means = np.array([[0.0, 0.0], [3.0, -1.0]])
    pop1 = gen_gaussian_mixture(means, n_per_device=500, seed=9)
    pop2 = gen_gaussian_mixture(means, n_per_device=500, seed=9)
    assert len(pop1) == 2
    assert pop1.weights == pytest.approx([0.5, 0.5])
    for a, b in zip(pop1.shards, pop2.shards):
        assert np.array_equal(a.features, b.features)
    for k, shard in enumerate(pop1.shards):
        emp = shard.features.mean(axis=0)
        assert np.linalg.norm(emp - means[k]) <= 4.0 / np.sqrt(500) * np.sqrt(2) + 0.05


def test_gaussian_mixture_seed_changes_draws():
    means = np.array([[0.0, 0.0]])
    a = gen_gaussian_mixture(means, 10, seed=1).shards[0].features
    b = gen_gaussian_mixture(means, 10, seed=2).shards[0].features
    assert not np.array_equal(a, b)


def test_hetero_logistic_shapes_and_ranges():
    pop = gen_hetero_logistic(
        num_devices=12, n_range=(5, 20), feature_dim=4, num_classes=2,
        heterogeneity=0.7, seed=3,
    )
    assert len(pop) == 12
    assert pop.feature_dim == 4
    sizes = [len(s) for s in pop.shards]
    assert all(5 <= n <= 20 for n in sizes)
    assert pop.weights == pytest.approx(np.array(sizes) / sum(sizes))
    for s in pop.shards:
        assert set(np.unique(s.labels)) <= {-1, 1}


def test_hetero_logistic_multiclass_labels_in_range():
    pop = gen_hetero_logistic(8, (4, 8), 3, num_classes=4, heterogeneity=0.5, seed=4)
    for s in pop.shards:
        assert s.labels.min() >= 0
        assert s.labels.max() < 4


def test_hetero_logistic_deterministic():
    kw = dict(num_devices=6, n_range=(5, 9), feature_dim=3, num_classes=2,
              heterogeneity=1.0, seed=11)
    p1 = gen_hetero_logistic(**kw)
    p2 = gen_hetero_logistic(**kw)
    for a, b in zip(p1.shards, p2.shards):
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(a.labels, b.labels)


def test_hetero_logistic_device_count_invariance():
    # adding devices must not disturb existing ones (per-device streams)
    small = gen_hetero_logistic(3, (5, 9), 3, 2, 1.0, seed=11)
    large = gen_hetero_logistic(6, (5, 9), 3, 2, 1.0, seed=11)
    for a, b in zip(small.shards, large.shards[:3]):
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(a.labels, b.labels)


def test_heterogeneity_spreads_devices():
    # at 0 every device sees one distribution; at 1 both the feature centers
    # and the label fractions should scatter
    base = dict(num_devices=40, n_range=(80, 80), feature_dim=3, num_classes=2, seed=5)
    iid = gen_hetero_logistic(heterogeneity=0.0, **base)
    het = gen_hetero_logistic(heterogeneity=1.0, **base)

    def center_spread(pop):
        centers = np.array([s.features.mean(axis=0) for s in pop.shards])
        return float(np.linalg.norm(centers.std(axis=0)))

    def label_spread(pop):
        fracs = np.array([np.mean(s.labels == 1) for s in pop.shards])
        return float(fracs.std())

    assert center_spread(het) > 2.0 * center_spread(iid)
    assert label_spread(het) > 2.0 * label_spread(iid)


def test_generator_argument_validation():
    with pytest.raises(ValueError):
        gen_hetero_logistic(0, (1, 2), 3, 2, 0.5, seed=0)
    with pytest.raises(ValueError):
        gen_hetero_logistic(2, (5, 2), 3, 2, 0.5, seed=0)
    with pytest.raises(ValueError):
        gen_hetero_logistic(2, (1, 2), 3, 1, 0.5, seed=0)
    with pytest.raises(ValueError):
        gen_hetero_logistic(2, (1, 2), 3, 2, -0.5, seed=0)
    with pytest.raises(ValueError):
        gen_gaussian_mixture(np.zeros((0, 2)), 5, seed=0)


# ---------------------------------------------------------------------------
# splitting


def test_split_partitions_devices():
    pop = gen_hetero_logistic(10, (3, 6), 2, 2, 0.5, seed=6)
    train, test = split_devices(pop, 0.6, seed=1)
    assert len(train) == 6
    assert len(test) == 4
    assert set(train.device_ids).isdisjoint(test.device_ids)
    assert sorted(train.device_ids + test.device_ids) == sorted(pop.device_ids)
    assert float(train.weights.sum()) == pytest.approx(1.0)
    assert float(test.weights.sum()) == pytest.approx(1.0)


def test_split_is_deterministic():
    pop = gen_hetero_logistic(10, (3, 6), 2, 2, 0.5, seed=6)
    a1, b1 = split_devices(pop, 0.5, seed=7)
    a2, b2 = split_devices(pop, 0.5, seed=7)
    assert a1.device_ids == a2.device_ids
    assert b1.device_ids == b2.device_ids
    a3, _ = split_devices(pop, 0.5, seed=8)
    assert a1.device_ids != a3.device_ids


def test_split_rejects_degenerate():
    pop = gen_hetero_logistic(3, (2, 3), 2, 2, 0.5, seed=6)
    with pytest.raises(ValueError):
        split_devices(pop, 0.01, seed=0)
    with pytest.raises(ValueError):
        split_devices(pop, 1.5, seed=0)


# ---------------------------------------------------------------------------
# jsonl interchange


def test_jsonl_round_trip_exact(tmp_path):
    pop = gen_hetero_logistic(5, (2, 6), 3, 2, 0.8, seed=13)
    path = tmp_path / "devices.jsonl"
    save_devices_jsonl(pop, path)
    back = load_devices_jsonl(path)
    assert back.device_ids == pop.device_ids
    assert back.weights == pytest.approx(pop.weights, abs=1e-15)
    for a, b in zip(pop.shards, back.shards):
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(a.labels, b.labels)
        assert a.labels.dtype == b.labels.dtype


def test_jsonl_real_valued_targets_survive(tmp_path):
    shards = [DeviceShard("r", np.array([[1.0], [2.0]]), np.array([0.25, -1.5]))]
    path = tmp_path / "reg.jsonl"
    save_devices_jsonl(Population(shards), path)
    back = load_devices_jsonl(path)
    assert back.shards[0].labels.dtype == np.float64
    assert np.array_equal(back.shards[0].labels, np.array([0.25, -1.5]))


def test_jsonl_invalid_json_names_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"id": "a", "x": [[1.0]], "y": [1]}\n{nope\n')
    with pytest.raises(ValueError, match="line 2"):
        load_devices_jsonl(path)


def test_jsonl_missing_key_names_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"id": "a", "x": [[1.0]]}\n')
    with pytest.raises(ValueError, match="line 1"):
        load_devices_jsonl(path)


def test_jsonl_label_count_mismatch_names_device(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"id": "devX", "x": [[1.0],[2.0]], "y": [1]}\n')
    with pytest.raises(ValueError, match="devX"):
        load_devices_jsonl(path)


def test_jsonl_dimension_mismatch_between_lines(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text(
        '{"id": "a", "x": [[1.0, 2.0]], "y": [1]}\n'
        '{"id": "b", "x": [[1.0]], "y": [1]}\n'
    )
    with pytest.raises(ValueError, match="line 2"):
        load_devices_jsonl(path)


def test_jsonl_non_numeric_features(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"id": "a", "x": [["oops"]], "y": [1]}\n')
    with pytest.raises(ValueError, match="numeric"):
        load_devices_jsonl(path)


def test_jsonl_empty_file_rejected(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("\n\n")
    with pytest.raises(ValueError, match="no devices"):
        load_devices_jsonl(path)
