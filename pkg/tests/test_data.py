import gzip

import numpy as np
import pytest
import yaml

from conftest import write_idx_images, write_idx_labels
from data.binning import assign_bins, bin_edges, bin_labels
from data.dataset import Dataset, DatasetConverter, train_val_split
from data.imbalance import ImbalanceSpec, apply_step_imbalance, mnist_step_spec, split_step_imbalance
from data.mnist_idx import load_mnist_idx, read_idx_images, read_idx_labels
from data.toy import ToySpec, generate_extreme_toy, generate_toy, henon_inverse, henon_map
from utils.errors import ConfigurationError, IngestionError, IntegrityError


def _labelled(counts, p=2, seed=0):
    labels = np.concatenate([np.full(c, m) for m, c in enumerate(counts)])
    features = np.random.default_rng(seed).standard_normal((labels.size, p))
    return Dataset(features=features, labels=labels, num_classes=len(counts))


class TestHenon:

    def test_known_points(self):
        np.testing.assert_allclose(henon_map(np.array([[0.0, 0.0], [1.0, 1.0]])), [[1.0, 0.0], [0.6, 0.3]])

    def test_inverse_round_trip(self):
        s = np.random.default_rng(0).uniform(-3, 3, size=(50, 2))
        np.testing.assert_allclose(henon_inverse(henon_map(s)), s, atol=1e-9)


class TestToy:

    def test_default_toy_counts(self):
        ds = generate_toy(seed=1)
        assert ds.num_classes == 7
        assert ds.class_counts.tolist() == [2000] * 7
        np.testing.assert_allclose(ds.features, henon_map(ds.sources))

    def test_per_class_counts_and_variance_flag(self):
        spec = ToySpec(means=[[0.0, 0.0], [5.0, 5.0]], spreads=[[4.0, 4.0], [1.0, 1.0]], per_class=[3000, 5],
                       mixing='none', spread_is_variance=True)
        ds = generate_toy(spec, seed=2)
        assert ds.class_counts.tolist() == [3000, 5]
        np.testing.assert_allclose(ds.sources[ds.labels == 0].std(axis=0), [2.0, 2.0], rtol=0.05)

    def test_same_seed_same_data(self):
        np.testing.assert_array_equal(generate_toy(seed=3).features, generate_toy(seed=3).features)

    def test_invalid_spec(self):
        with pytest.raises(ConfigurationError):
            ToySpec(means=[[0.0, 0.0]], spreads=[[0.0, 1.0]])
        with pytest.raises(ConfigurationError):
            ToySpec(means=[[0.0, 0.0, 0.0]], spreads=[[1.0, 1.0, 1.0]], mixing='henon')

    def test_extreme_toy_shapes(self):
        train, validation = generate_extreme_toy(classes=30, per_class=5, seed=0, validation_per_class=4)
        assert (train.n, train.p, train.num_classes) == (150, 2, 30)
        assert validation.class_counts.tolist() == [4] * 30
        assert validation.split == 'validation'
        assert np.all(np.abs(train.sources) < 4.0 + 1.0)


class TestMnistIdx:

    def test_reads_and_normalizes(self, tmp_path):
        pixels = np.zeros((3, 2, 2), dtype=np.uint8)
        pixels[1, 0, 0] = 255
        images = write_idx_images(tmp_path / 'img', pixels)
        labels = write_idx_labels(tmp_path / 'lbl', np.array([0, 7, 9]))
        ds = load_mnist_idx(images, labels)
        assert (ds.n, ds.p) == (3, 4)
        assert ds.features[1, 0] == 1.0
        assert ds.labels.tolist() == [0, 7, 9]

    def test_gzip_files(self, tmp_path):
        plain = write_idx_images(tmp_path / 'img', np.full((2, 1, 3), 51, dtype=np.uint8))
        packed = str(tmp_path / 'img.gz')
        with open(plain, 'rb') as src, gzip.open(packed, 'wb') as dst:
            dst.write(src.read())
        np.testing.assert_array_equal(read_idx_images(packed), read_idx_images(plain))

    def test_bad_magic(self, tmp_path):
        path = write_idx_images(tmp_path / 'img', np.zeros((1, 2, 2)), magic=0x00000801)
        with pytest.raises(IngestionError, match="マジック") as info:
            read_idx_images(path)
        assert info.value.offset == 0

    def test_truncated_pixels(self, tmp_path):
        path = write_idx_images(tmp_path / 'img', np.zeros((2, 2, 2)), count=5)
        with pytest.raises(IngestionError, match="途中"):
            read_idx_images(path)

    def test_truncated_header(self, tmp_path):
        path = tmp_path / 'lbl'
        path.write_bytes(b'\x00\x00\x08')
        with pytest.raises(IngestionError):
            read_idx_labels(str(path))

    def test_count_mismatch(self, tmp_path):
        images = write_idx_images(tmp_path / 'img', np.zeros((3, 2, 2)))
        labels = write_idx_labels(tmp_path / 'lbl', np.array([0, 1]))
        with pytest.raises(IngestionError, match="一致しません"):
            load_mnist_idx(images, labels)
        labels = write_idx_labels(tmp_path / 'lbl3', np.array([0, 1, 2]))
        with pytest.raises(IngestionError):
            load_mnist_idx(images, labels, expected_count=60000)

    def test_missing_file(self, tmp_path):
        with pytest.raises(IngestionError):
            read_idx_labels(str(tmp_path / 'missing'))


class TestImbalance:

    def test_step_imbalance_counts(self):
        ds = _labelled([50, 50, 50])
        spec = ImbalanceSpec(majority={0: 40, 1: 40}, minority={2: 5})
        result = apply_step_imbalance(ds, spec, seed=0)
        assert result.class_counts.tolist() == [40, 40, 5]
        assert result.metadata['imbalance']['minority'] == {'2': 5}

    def test_not_enough_samples(self):
        with pytest.raises(ConfigurationError, match="不足"):
            apply_step_imbalance(_labelled([3, 3]), ImbalanceSpec(majority={0: 3}, minority={1: 1}), seed=0)
        with pytest.raises(ConfigurationError):
            apply_step_imbalance(_labelled([30, 3]), ImbalanceSpec(majority={0: 10, 1: 5}), seed=0)

    def test_invalid_spec(self):
        with pytest.raises(ConfigurationError):
            ImbalanceSpec(majority={0: 10}, minority={0: 2})
        with pytest.raises(ConfigurationError):
            ImbalanceSpec(majority={0: 10}, minority={1: 10})

    def test_mnist_default_spec(self):
        spec = mnist_step_spec(minority_classes=[3, 8])
        assert spec.minority == {3: 1200, 8: 1200}
        assert len(spec.majority) == 8 and set(spec.majority.values()) == {6000}

    def test_split_leaves_disjoint_balanced_validation(self):
        ds = _labelled([40, 40, 40])
        ds.targets = np.arange(ds.n, dtype=np.float64)
        spec = ImbalanceSpec(majority={0: 20, 1: 20}, minority={2: 4}, validation_per_class=10)
        train, validation = split_step_imbalance(ds, spec, seed=1)
        assert train.class_counts.tolist() == [20, 20, 4]
        assert validation.class_counts.tolist() == [10, 10, 10]
        assert not set(train.targets) & set(validation.targets)
        assert 'imbalance' not in validation.metadata


class TestBinning:

    def test_one_to_ten_in_two_bins(self):
        assert bin_labels(np.arange(1, 11), 2).tolist() == [0] * 5 + [1] * 5

    def test_bins_are_balanced(self):
        counts = np.bincount(bin_labels(np.random.default_rng(0).standard_normal(103), 10))
        assert counts.max() - counts.min() <= 1

    def test_edges_assign_new_values(self):
        y = np.arange(1.0, 11.0)
        edges = bin_edges(y, 2)
        assert edges.tolist() == [6.0]
        assert assign_bins([0.0, 5.9, 6.0, 100.0], edges).tolist() == [0, 0, 1, 1]

    def test_ties_share_a_bin(self):
        y = np.array([1.0, 2.0, 2.0, 2.0, 3.0, 4.0])
        labels = bin_labels(y, 2)
        assert labels.tolist() == [0, 1, 1, 1, 1, 1]
        np.testing.assert_array_equal(labels, assign_bins(y, bin_edges(y, 2)))

    def test_labels_agree_with_edges_on_rounded_values(self):
        y = np.round(np.random.default_rng(1).standard_normal(500), 1)
        edges = bin_edges(y, 5)
        np.testing.assert_array_equal(bin_labels(y, 5), assign_bins(y, edges))
        for b, edge in enumerate(edges):
            assert set(bin_labels(y, 5)[y == edge]) == {b + 1}

    def test_ties_that_empty_a_bin(self):
        with pytest.raises(ConfigurationError, match="空のビン"):
            bin_labels([1.0, 1.0, 1.0, 1.0, 2.0, 3.0], 2)

    def test_too_few_distinct_values(self):
        with pytest.raises(ConfigurationError):
            bin_labels([1.0, 1.0, 2.0], 3)
        with pytest.raises(ConfigurationError):
            bin_labels([1.0, np.nan], 2)


class TestDatasetDump:

    def test_round_trip(self, tmp_path):
        ds = generate_toy(ToySpec(per_class=5), seed=4)
        converter = DatasetConverter()
        result = converter.dump(ds, str(tmp_path), 'train')
        assert result['出力成功']
        assert result['統計情報']['サンプル数'] == 35
        loaded = converter.load(str(tmp_path), 'train')
        np.testing.assert_array_equal(loaded.features, ds.features)
        np.testing.assert_array_equal(loaded.labels, ds.labels)
        np.testing.assert_array_equal(loaded.sources, ds.sources)
        assert loaded.spec_hash == ds.spec_hash

    def test_corrupted_blob(self, tmp_path):
        converter = DatasetConverter()
        converter.dump(_labelled([4, 4]), str(tmp_path), 'train')
        blob = tmp_path / 'train.features.f64'
        raw = bytearray(blob.read_bytes())
        raw[0] ^= 0xFF
        blob.write_bytes(bytes(raw))
        with pytest.raises(IntegrityError, match="ハッシュ"):
            converter.load(str(tmp_path), 'train')
        report = converter.validate_dataset_dump(str(tmp_path))
        assert not report['valid']

    def test_config_file_and_validation(self, tmp_path):
        train, validation = train_val_split(_labelled([10, 10]), 0.8, np.random.default_rng(0))
        assert (train.n, validation.n) == (16, 4)
        converter = DatasetConverter()
        converter.dump(train, str(tmp_path))
        converter.dump(validation, str(tmp_path))
        path = converter.write_config_file(str(tmp_path), {'train': train, 'validation': validation})
        with open(path, encoding='utf-8') as f:
            summary = yaml.safe_load(f)
        assert summary['n'] == {'train': 16, 'validation': 4}
        report = converter.validate_dataset_dump(str(tmp_path))
        assert report['valid']
        assert set(report['statistics']) == {'train', 'validation'}

    def test_missing_dump(self, tmp_path):
        assert not DatasetConverter().validate_dataset_dump(str(tmp_path))['valid']
