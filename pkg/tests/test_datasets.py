import numpy as np
import pytest

from modislab.datasets import (
    UNLABELED,
    GeneratorConfig,
    drop_modality_class,
    generate_paired,
    load_paired,
    load_unpaired,
    mask_labels,
    save_paired,
    save_unpaired,
    split_train_test,
    subsample_class,
    unpair,
)
from modislab.errors import ConfigError, StratificationError

from conftest import toy_unpaired


def small_config(**kwargs):
    base = dict(n_samples=600, n_classes=3, modality_dims=(12, 8, 6),
                class_separation=4.0, latent_factor_dim=5, noise_sd=0.5, seed=3)
    base.update(kwargs)
    return GeneratorConfig(**base)


def nearest_centroid_bacc(train, test, modality=0):
    """Chance-level probe: classify test rows by the nearest train class mean."""
    x, y = train.features[modality], train.labels[modality]
    centroids = np.stack([x[y == c].mean(axis=0) for c in range(1, train.n_classes + 1)])
    xt, yt = test.features[modality], test.labels[modality]
    preds = np.argmin(((xt[:, None, :] - centroids[None]) ** 2).sum(-1), axis=1) + 1
    recalls = [np.mean(preds[yt == c] == c) for c in np.unique(yt)]
    return float(np.mean(recalls))


class TestGenerate:
    def test_published_scale_shapes(self, intersim_scale):
        cfg, paired = intersim_scale
        assert [x.shape for x in paired.features] == [(11500, 367), (11500, 131), (11500, 160)]
        assert np.bincount(paired.labels, minlength=6)[1:].tolist() == [2300] * 5

    def test_deterministic(self):
        a = generate_paired(small_config())
        b = generate_paired(small_config())
        for xa, xb in zip(a.features, b.features):
            assert np.array_equal(xa, xb)
        assert np.array_equal(a.labels, b.labels)

    def test_seed_changes_data(self):
        a = generate_paired(small_config(seed=1))
        b = generate_paired(small_config(seed=2))
        assert not np.array_equal(a.features[0], b.features[0])

    def test_zero_separation_is_chance_level(self):
        cfg = small_config(n_samples=3000, class_separation=0.0)
        ds = unpair(generate_paired(cfg), seed=0)
        train, test = split_train_test(ds, 0.2, seed=0)
        bacc = nearest_centroid_bacc(train, test)
        assert 1 / cfg.n_classes - 0.13 <= bacc <= 1 / cfg.n_classes + 0.15

    def test_class_separation_invariant(self):
        cfg = small_config(n_samples=900, noise_sd=0.4, class_separation=4.0)
        paired = generate_paired(cfg)
        for x in paired.features:
            means = np.stack([x[paired.labels == c].mean(axis=0) for c in (1, 2, 3)])
            within = np.mean([x[paired.labels == c].std(axis=0).mean() for c in (1, 2, 3)])
            gaps = [np.linalg.norm(means[i] - means[j]) for i in range(3) for j in range(i + 1, 3)]
            assert min(gaps) > 2 * within

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            small_config(n_classes=1)
        with pytest.raises(ConfigError):
            small_config(modality_dims=(5, 0))
        with pytest.raises(ConfigError):
            small_config(noise_sd=0.0)


class TestUnpair:
    def test_cell_counts_published_scale(self, intersim_splits):
        unpaired, _, _ = intersim_splits
        for m in range(3):
            for cls in range(1, 6):
                assert unpaired.cell_count(cls, m) in (766, 767)

    def test_partition(self):
        paired = generate_paired(small_config())
        ds = unpair(paired, seed=5)
        seen = np.concatenate(ds.pair_ids)
        assert ds.n_records == paired.n_samples
        assert sorted(seen.tolist()) == sorted(paired.pair_ids.tolist())

    def test_single_modality_identity(self):
        paired = generate_paired(small_config(modality_dims=(7,)))
        ds = unpair(paired, seed=1)
        assert ds.counts(0) == paired.n_samples
        assert np.array_equal(np.sort(ds.pair_ids[0]), paired.pair_ids)

    def test_deterministic(self):
        paired = generate_paired(small_config())
        a, b = unpair(paired, seed=9), unpair(paired, seed=9)
        for m in range(3):
            assert np.array_equal(a.features[m], b.features[m])


class TestSplit:
    def test_cell_arithmetic_published_scale(self, intersim_splits):
        _, train, test = intersim_splits
        # 766-record cells split 613/153, 767-record cells 614/153
        for m in range(3):
            for cls in range(1, 6):
                tr, te = train.cell_count(cls, m), test.cell_count(cls, m)
                assert te == 153 and tr in (613, 614)
        assert abs(train.n_records - 9200) <= 15
        assert abs(test.n_records - 2300) <= 15

    def test_disjoint_union(self):
        ds = unpair(generate_paired(small_config()), seed=2)
        train, test = split_train_test(ds, 0.2, seed=2)
        tr = np.concatenate(train.sample_ids)
        te = np.concatenate(test.sample_ids)
        assert len(np.intersect1d(tr, te)) == 0
        assert sorted(np.concatenate([tr, te]).tolist()) == sorted(np.concatenate(ds.sample_ids).tolist())

    def test_small_stratum_errors(self):
        ds = toy_unpaired([3, 3], [4, 4], n_classes=3)  # one record per (class, modality)
        with pytest.raises(StratificationError, match="class=1, modality=0"):
            split_train_test(ds, 0.2)

    def test_ratio_validation(self):
        ds = toy_unpaired([10], [4])
        for ratio in (0.0, 1.0, -0.1):
            with pytest.raises(ConfigError):
                split_train_test(ds, ratio)


class TestMaskLabels:
    def test_one_per_pair(self):
        ds = toy_unpaired([30, 30, 30], [4, 4, 4], n_classes=5)
        masked = mask_labels(ds, per_pair_count=1, seed=0)
        assert masked.labeled_count() == 15
        for m in range(3):
            assert np.array_equal(masked.features[m], ds.features[m])
            assert np.array_equal(masked.pair_ids[m], ds.pair_ids[m])

    def test_fraction_identity_and_zero(self):
        ds = toy_unpaired([40, 40], [3, 3], n_classes=4)
        assert np.array_equal(mask_labels(ds, fraction=1.0, seed=1).labels[0], ds.labels[0])
        assert mask_labels(ds, fraction=0.0, seed=1).labeled_count() == 0

    def test_count_too_large(self):
        ds = toy_unpaired([10, 10], [3, 3], n_classes=5)
        with pytest.raises(ConfigError, match="exceeds cell"):
            mask_labels(ds, per_pair_count=3, seed=0)

    def test_class_scope(self):
        ds = toy_unpaired([40, 40], [3, 3], n_classes=4)
        masked = mask_labels(ds, fraction=0.0, seed=0, classes=[1, 2])
        for m in range(2):
            kept = masked.labels[m][masked.labels[m] != UNLABELED]
            assert set(kept.tolist()) == {3, 4}

    def test_bad_mode(self):
        ds = toy_unpaired([10], [3])
        with pytest.raises(ConfigError):
            mask_labels(ds)
        with pytest.raises(ConfigError):
            mask_labels(ds, fraction=0.5, per_pair_count=1)


class TestSubsampleClass:
    def test_target_reduced(self):
        ds = toy_unpaired([30, 30, 30], [4, 4, 4], n_classes=5)
        out = subsample_class(ds, target_class=5, per_modality_count=6, seed=0)
        assert sum(out.cell_count(5, m) for m in range(3)) == 18

    def test_zero_removes_class(self):
        ds = toy_unpaired([20, 20], [3, 3], n_classes=4)
        out = subsample_class(ds, target_class=2, per_modality_count=0, seed=0)
        assert all(out.cell_count(2, m) == 0 for m in range(2))

    def test_other_classes_untouched(self):
        ds = toy_unpaired([30, 30], [4, 4], n_classes=3)
        out = subsample_class(ds, target_class=3, per_modality_count=2, seed=0)
        for m in range(2):
            for cls in (1, 2):
                keep = out.labels[m] == cls
                orig = ds.labels[m] == cls
                assert keep.sum() == orig.sum()
                assert np.array_equal(out.features[m][keep], ds.features[m][orig])

    def test_too_large_errors(self):
        ds = toy_unpaired([10, 10], [3, 3], n_classes=5)
        with pytest.raises(ConfigError, match="exceeds cell"):
            subsample_class(ds, target_class=1, per_modality_count=5, seed=0)


class TestDropModalityClass:
    def test_single_pair_emptied(self):
        ds = toy_unpaired([30, 30, 30], [4, 4, 4], n_classes=5)
        out = drop_modality_class(ds, [(5, 0)], keep_count=0, seed=0)
        assert out.cell_count(5, 0) == 0
        for m in range(3):
            for cls in range(1, 6):
                if (cls, m) != (5, 0):
                    assert out.cell_count(cls, m) == ds.cell_count(cls, m)

    def test_four_pairs_two_classes(self):
        ds = toy_unpaired([30, 30, 30], [4, 4, 4], n_classes=5)
        pairs = [(4, 0), (4, 1), (5, 1), (5, 2)]
        out = drop_modality_class(ds, pairs, keep_count=0, seed=0)
        for cls, m in pairs:
            assert out.cell_count(cls, m) == 0
        assert out.cell_count(4, 2) == ds.cell_count(4, 2)
        assert out.cell_count(5, 0) == ds.cell_count(5, 0)

    def test_keep_one(self):
        ds = toy_unpaired([30, 30, 30], [4, 4, 4], n_classes=5)
        out = drop_modality_class(ds, [(5, 0)], keep_count=1, seed=0)
        assert out.cell_count(5, 0) == 1

    def test_keep_too_large(self):
        ds = toy_unpaired([10, 10], [3, 3], n_classes=5)
        with pytest.raises(ConfigError, match="exceeds cell"):
            drop_modality_class(ds, [(1, 0)], keep_count=3, seed=0)


class TestRoundTrip:
    def test_unpaired_csv(self, tmp_path):
        ds = unpair(generate_paired(small_config()), seed=4)
        ds = mask_labels(ds, fraction=0.5, seed=4)
        save_unpaired(ds, tmp_path)
        back = load_unpaired(tmp_path, ds.n_classes)
        for m in range(ds.n_modalities):
            assert np.array_equal(ds.features[m], back.features[m])
            assert np.array_equal(ds.labels[m], back.labels[m])
            assert np.array_equal(ds.pair_ids[m], back.pair_ids[m])
            assert np.array_equal(ds.sample_ids[m], back.sample_ids[m])

    def test_paired_csv(self, tmp_path):
        paired = generate_paired(small_config())
        save_paired(paired, tmp_path)
        back = load_paired(tmp_path, paired.n_classes)
        for m in range(paired.n_modalities):
            assert np.array_equal(paired.features[m], back.features[m])
        assert np.array_equal(paired.labels, back.labels)

    def test_paired_select(self):
        paired = generate_paired(small_config())
        sub = paired.select([5, 2, 9])
        assert np.array_equal(sub.pair_ids, [5, 2, 9])
        assert np.array_equal(sub.features[1][0], paired.features[1][5])


class TestDeterminism:
    def test_scenario_ops_reproducible(self):
        ds = toy_unpaired([40, 40, 40], [5, 5, 5], n_classes=4, seed=2)
        for op in (
            lambda d, s: mask_labels(d, fraction=0.3, seed=s),
            lambda d, s: subsample_class(d, 2, 3, seed=s),
            lambda d, s: drop_modality_class(d, [(1, 0)], 2, seed=s),
            lambda d, s: split_train_test(d, 0.25, seed=s)[0],
        ):
            a, b = op(ds, 11), op(ds, 11)
            for m in range(3):
                assert np.array_equal(a.features[m], b.features[m])
                assert np.array_equal(a.labels[m], b.labels[m])
