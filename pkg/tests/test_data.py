"""IDX parsing, synthetic data, partitioning, and imbalance measures."""

import math
import struct

import numpy as np
import pytest

from fedbalance import nn
from fedbalance.data import (
    PartitionPlan,
    composition,
    cosine_similarity,
    global_imbalance,
    load_mnist_idx,
    local_imbalance,
    make_shard,
    make_synthetic,
    partition,
    split_indices,
    write_idx,
)
from fedbalance.errors import ConfigError, IdxFormatError


def tiny_dataset(per_class=30, classes=4, seed=0):
    return make_synthetic(classes, 8, per_class, separation=6.0, seed=seed)


def write_raw_idx(tmp_path, image_magic=0x803, label_magic=0x801, count=3, rows=2, cols=2):
    images = tmp_path / "img.idx"
    labels = tmp_path / "lbl.idx"
    pixels = np.arange(count * rows * cols, dtype=np.uint8)
    with open(images, "wb") as f:
        f.write(struct.pack(">IIII", image_magic, count, rows, cols))
        f.write(pixels.tobytes())
    with open(labels, "wb") as f:
        f.write(struct.pack(">II", label_magic, count))
        f.write(np.array([0, 1, 1], dtype=np.uint8)[:count].tobytes())
    return images, labels


class TestIdxLoader:
    def test_round_trip_through_writer(self, tmp_path):
        rng = np.random.default_rng(0)
        feats = rng.uniform(0, 1, size=(40, 16))
        labels = rng.integers(0, 5, size=40)
        labels[:5] = np.arange(5)  # every class present
        write_idx(feats, labels, tmp_path / "i.idx", tmp_path / "l.idx")
        ds = load_mnist_idx(tmp_path / "i.idx", tmp_path / "l.idx")
        assert len(ds) == 40 and ds.feature_dim == 16 and ds.class_count == 5
        np.testing.assert_array_equal(ds.labels, labels)
        # uint8 quantization bounds the reconstruction error
        assert np.abs(ds.features - feats).max() <= 0.5 / 255
        assert ds.features.min() >= 0.0 and ds.features.max() <= 1.0

    def test_header_fields_read_as_big_endian(self, tmp_path):
        # header checked against an independent byte-level decode
        images, labels = write_raw_idx(tmp_path, count=3, rows=2, cols=2)
        raw = open(images, "rb").read()
        assert int.from_bytes(raw[0:4], "big") == 0x803
        assert int.from_bytes(raw[4:8], "big") == 3
        ds = load_mnist_idx(images, labels)
        assert len(ds) == 3 and ds.feature_dim == 4

    def test_wrong_image_magic_rejected(self, tmp_path):
        images, labels = write_raw_idx(tmp_path, image_magic=0x801)
        with pytest.raises(IdxFormatError, match="offset 0"):
            load_mnist_idx(images, labels)

    def test_label_file_with_image_magic_rejected(self, tmp_path):
        images, labels = write_raw_idx(tmp_path, label_magic=0x803)
        with pytest.raises(IdxFormatError, match="offset 0"):
            load_mnist_idx(images, labels)

    def test_zero_images_rejected(self, tmp_path):
        images, labels = write_raw_idx(tmp_path, count=0)
        with pytest.raises(IdxFormatError, match="offset 4"):
            load_mnist_idx(images, labels)

    def test_truncated_pixels_rejected(self, tmp_path):
        images, labels = write_raw_idx(tmp_path)
        data = open(images, "rb").read()
        with open(images, "wb") as f:
            f.write(data[:-3])
        with pytest.raises(IdxFormatError, match="truncated"):
            load_mnist_idx(images, labels)

    def test_count_mismatch_rejected(self, tmp_path):
        images, _ = write_raw_idx(tmp_path)
        labels = tmp_path / "short.idx"
        with open(labels, "wb") as f:
            f.write(struct.pack(">II", 0x801, 2))
            f.write(bytes([0, 1]))
        with pytest.raises(IdxFormatError, match="does not match"):
            load_mnist_idx(images, labels)


class TestSynthetic:
    def test_same_seed_identical(self):
        a = make_synthetic(3, 5, 10, 4.0, seed=9)
        b = make_synthetic(3, 5, 10, 4.0, seed=9)
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_wide_separation_is_learnable(self):
        # oracle: a small trained classifier must nail the training data
        ds = make_synthetic(4, 16, 120, separation=10.0, seed=1)
        model = nn.init_model(nn.ModelSpec(16, [32], 4), 0)
        rng = np.random.default_rng(0)
        for _ in range(300):
            batch = rng.integers(0, len(ds), size=32)
            trace = nn.forward(model, ds.features[batch])
            grad = trace.probs - np.eye(4)[ds.labels[batch]]
            model = nn.sgd_step(model, nn.backward(model, trace, grad), 0.5)
        trace = nn.forward(model, ds.features)
        accuracy = (trace.probs.argmax(axis=1) == ds.labels).mean()
        assert accuracy > 0.99

    def test_zero_per_class_rejected(self):
        with pytest.raises(ConfigError):
            make_synthetic(3, 5, 0, 4.0, seed=0)

    def test_non_positive_separation_rejected(self):
        with pytest.raises(ConfigError):
            make_synthetic(3, 5, 10, 0.0, seed=0)

    def test_features_in_unit_interval(self):
        ds = tiny_dataset()
        assert ds.features.min() >= 0.0 and ds.features.max() <= 1.0


class TestPartition:
    def test_balanced_full_coverage_gives_gamma_one(self):
        ds = tiny_dataset(per_class=50)
        plan = PartitionPlan(
            num_clients=5, classes_per_client=(4, 4), samples_per_class=10, seed=0
        )
        shards = partition(ds, plan)
        assert global_imbalance(shards) == 1.0
        for s in shards:
            assert local_imbalance(s) == 1.0

    def test_shards_disjoint_and_conserving(self):
        ds = tiny_dataset(per_class=60, classes=5)
        plan = PartitionPlan(
            num_clients=8, classes_per_client=(2, 4), samples_per_class=9, seed=3
        )
        shards = partition(ds, plan)
        all_idx = np.concatenate([s.indices for s in shards])
        assert len(np.unique(all_idx)) == len(all_idx)
        totals = composition(shards)
        per_class_available = np.bincount(ds.labels, minlength=5)
        assert (totals <= per_class_available).all()
        for s in shards:
            np.testing.assert_array_equal(
                s.per_class_counts, np.bincount(ds.labels[s.indices], minlength=5)
            )

    def test_downsampling_scheme_hits_target_ratio(self):
        # 250 per majority class and about 25 per minority class per holder
        ds = make_synthetic(10, 6, 5200, separation=5.0, seed=4)
        plan = PartitionPlan(
            num_clients=20,
            classes_per_client=(10, 10),
            samples_per_class=250,
            global_ratio=10.0,
            minority_classes=(2, 4, 7),
            seed=1,
        )
        shards = partition(ds, plan)
        totals = composition(shards)
        assert global_imbalance(shards) == pytest.approx(10.0, rel=0.10)
        for c in (2, 4, 7):
            assert totals[c] == pytest.approx(500, rel=0.1)
        for c in (0, 1, 3, 5, 6, 8, 9):
            assert totals[c] == 5000

    def test_infeasible_plan_lists_shortfall(self):
        ds = tiny_dataset(per_class=20)
        plan = PartitionPlan(
            num_clients=10, classes_per_client=(4, 4), samples_per_class=10, seed=0
        )
        with pytest.raises(ConfigError, match="need 100, have 20"):
            partition(ds, plan)

    def test_every_class_held_somewhere(self):
        ds = tiny_dataset(per_class=60, classes=4)
        plan = PartitionPlan(
            num_clients=3, classes_per_client=(1, 1), samples_per_class=5, seed=2
        )
        shards = partition(ds, plan)
        # 3 clients x 1 class cannot cover 4 classes; the swap pass still
        # guarantees every *covered* class has a holder and classes stay
        # within the plan's per-client count
        for s in shards:
            assert (s.per_class_counts > 0).sum() == 1

    def test_allowed_indices_respected(self):
        ds = tiny_dataset(per_class=60)
        allowed = np.flatnonzero(np.arange(len(ds)) % 2 == 0)
        plan = PartitionPlan(
            num_clients=4, classes_per_client=(4, 4), samples_per_class=5, seed=0
        )
        shards = partition(ds, plan, allowed_indices=allowed)
        for s in shards:
            assert np.isin(s.indices, allowed).all()

    def test_feature_shift_attached_when_configured(self):
        ds = tiny_dataset(per_class=40)
        plan = PartitionPlan(
            num_clients=2,
            classes_per_client=(4, 4),
            samples_per_class=5,
            seed=0,
            feature_shift_sigma=0.1,
        )
        shards = partition(ds, plan)
        assert all(s.feature_shift is not None for s in shards)
        feats, _ = shards[0].features_and_labels()
        base = ds.features[shards[0].indices]
        assert not np.array_equal(feats, base)


class TestImbalanceMeasures:
    def test_local_imbalance_ratio(self):
        ds = tiny_dataset(per_class=60, classes=2)
        by_class = ds.indices_by_class()
        shard = make_shard(ds, 0, np.concatenate([by_class[0][:50], by_class[1][:5]]))
        assert local_imbalance(shard) == 10.0

    def test_missing_class_is_infinite(self):
        ds = tiny_dataset(per_class=60, classes=2)
        shard = make_shard(ds, 0, ds.indices_by_class()[0][:50])
        assert local_imbalance(shard) == math.inf

    def test_all_equal_is_one(self):
        ds = tiny_dataset(per_class=60, classes=3)
        idx = np.concatenate([c[:7] for c in ds.indices_by_class()])
        assert local_imbalance(make_shard(ds, 0, idx)) == 1.0

    def test_global_balance_despite_local_extremes(self):
        ds = tiny_dataset(per_class=60, classes=2)
        by_class = ds.indices_by_class()
        a = make_shard(ds, 0, by_class[0][:10])
        b = make_shard(ds, 1, by_class[1][:10])
        assert local_imbalance(a) == math.inf
        assert global_imbalance([a, b]) == 1.0

    def test_composition_is_exact_sum(self):
        ds = tiny_dataset(per_class=60, classes=3)
        by_class = ds.indices_by_class()
        a = make_shard(ds, 0, np.concatenate([by_class[0][:4], by_class[1][:2]]))
        b = make_shard(ds, 1, np.concatenate([by_class[1][:0], by_class[2][:5]]))
        np.testing.assert_array_equal(composition([a, b]), [4, 2, 5])

    def test_scale_free(self):
        ds = tiny_dataset(per_class=60, classes=2)
        by_class = ds.indices_by_class()
        small = make_shard(ds, 0, np.concatenate([by_class[0][:10], by_class[1][:2]]))
        large = make_shard(ds, 1, np.concatenate([by_class[0][:50], by_class[1][:10]]))
        assert local_imbalance(small) == local_imbalance(large)


class TestCosineSimilarity:
    def test_parallel_vectors(self):
        assert cosine_similarity(np.array([1.0, 1.0]), np.array([2.0, 2.0])) == pytest.approx(1.0)

    def test_orthogonal_vectors(self):
        assert cosine_similarity(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == pytest.approx(0.0)

    def test_arithmetic_example(self):
        assert cosine_similarity(np.array([3.0, 4.0]), np.array([4.0, 3.0])) == pytest.approx(
            24 / 25
        )

    def test_zero_vector_rejected(self):
        with pytest.raises(ValueError):
            cosine_similarity(np.zeros(2), np.ones(2))

    def test_symmetric_and_scale_invariant(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            u, v = rng.normal(size=4), rng.normal(size=4)
            a = cosine_similarity(u, v)
            assert a == pytest.approx(cosine_similarity(v, u), abs=1e-12)
            assert a == pytest.approx(cosine_similarity(3.5 * u, v), abs=1e-12)
            assert -1.0 <= a <= 1.0


class TestSplitIndices:
    def test_three_way_split_disjoint_and_stratified(self):
        ds = tiny_dataset(per_class=50, classes=4)
        train, test, aux = split_indices(ds, test_per_class=10, aux_per_class=5, seed=0)
        assert len(np.intersect1d(train, test)) == 0
        assert len(np.intersect1d(train, aux)) == 0
        assert len(np.intersect1d(test, aux)) == 0
        assert len(train) + len(test) + len(aux) == len(ds)
        np.testing.assert_array_equal(
            np.bincount(ds.labels[test], minlength=4), [10] * 4
        )
        np.testing.assert_array_equal(np.bincount(ds.labels[aux], minlength=4), [5] * 4)

    def test_insufficient_samples_rejected(self):
        ds = tiny_dataset(per_class=10, classes=3)
        with pytest.raises(ConfigError):
            split_indices(ds, test_per_class=6, aux_per_class=5, seed=0)
