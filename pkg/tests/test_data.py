"""Tests for manifests, preprocessing, augmentation and synthetic data."""
import numpy as np
import pytest
import torch

from src.data.dataset import (
    ArrayAgeDataset,
    AugmentConfig,
    ManifestAgeDataset,
    augment,
    decode_image,
    load_manifest,
    preprocess,
)
from src.data.synthetic import decode_age, export_synthetic, synth_ages, synth_arrays, synth_dataset
from src.exceptions import DataError, ImageDecodeError, ManifestParseError
from src.labels.granularity import AgeLabel


def write_manifest(directory, body):
    path = directory / "m.csv"
    path.write_text(body, encoding="utf-8")
    return path


class TestLoadManifest:
    def test_records_in_file_order(self, image_dir):
        manifest = load_manifest(image_dir / "manifest.csv", image_dir)
        assert [r.image_path for r in manifest] == ["images/a.png", "images/b.png"]
        assert manifest[0].apparent_age == 44.3
        assert manifest[0].annotator_stddev == 3.1
        assert manifest[1].annotator_stddev is None
        assert manifest.failures == []

    def test_missing_image_is_recorded_with_line(self, image_dir):
        path = write_manifest(image_dir, "image_path,apparent_age\nimages/a.png,30\nimages/zz.png,31\n")
        manifest = load_manifest(path, image_dir)
        assert len(manifest) == 1
        assert manifest.failures[0][0] == 3

    def test_bad_age_reports_line(self, image_dir):
        path = write_manifest(image_dir, "image_path,apparent_age\nimages/a.png,30\nimages/b.png,abc\n")
        with pytest.raises(ManifestParseError) as exc:
            load_manifest(path, image_dir)
        assert exc.value.line == 3

    def test_missing_header(self, image_dir):
        path = write_manifest(image_dir, "images/a.png,30\n")
        with pytest.raises(ManifestParseError) as exc:
            load_manifest(path, image_dir)
        assert exc.value.line == 1

    def test_path_outside_root(self, image_dir):
        path = write_manifest(image_dir, "image_path,apparent_age\n../escape.png,30\n")
        with pytest.raises(ManifestParseError):
            load_manifest(path, image_dir)

    def test_header_only(self, image_dir):
        path = write_manifest(image_dir, "image_path,apparent_age\n")
        with pytest.raises(DataError):
            load_manifest(path, image_dir)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError):
            load_manifest(tmp_path / "absent.csv", tmp_path)

    def test_out_of_range_ages_counted(self, image_dir):
        path = write_manifest(image_dir, "image_path,apparent_age\nimages/a.png,0.2\nimages/b.png,130\n")
        assert load_manifest(path, image_dir).clamped == 2


class TestPreprocess:
    def test_resizes_and_normalizes(self):
        image = np.full((40, 30, 3), 255, dtype=np.uint8)
        tensor = preprocess(image, 32)
        assert tuple(tensor.shape) == (3, 32, 32)
        assert torch.allclose(tensor, torch.ones_like(tensor))

    def test_black_maps_to_minus_one(self):
        tensor = preprocess(np.zeros((32, 32, 3), dtype=np.uint8), 32)
        assert torch.all(tensor == -1.0)

    def test_from_path(self, image_dir):
        assert tuple(preprocess(image_dir / "images" / "a.png", 32).shape) == (3, 32, 32)

    def test_corrupt_file(self, tmp_path):
        bad = tmp_path / "bad.png"
        bad.write_bytes(b"not an image")
        with pytest.raises(ImageDecodeError):
            decode_image(bad)


class TestAugment:
    @pytest.fixture
    def image(self):
        return np.random.default_rng(0).integers(0, 256, size=(32, 32, 3), dtype=np.uint8)

    def test_identity_without_pad_or_flip(self, image):
        config = AugmentConfig(pad_pixels=0, horizontal_flip_probability=0.0)
        assert np.array_equal(augment(image, config, np.random.default_rng(1)), image)

    def test_always_flip(self, image):
        config = AugmentConfig(pad_pixels=0, horizontal_flip_probability=1.0)
        assert np.array_equal(augment(image, config, np.random.default_rng(1)), image[:, ::-1])

    def test_same_generator_state_same_output(self, image):
        config = AugmentConfig()
        a = augment(image, config, np.random.default_rng(5))
        b = augment(image, config, np.random.default_rng(5))
        assert np.array_equal(a, b)
        assert a.shape == image.shape and a.dtype == image.dtype

    def test_padding_is_zero(self):
        image = np.full((32, 32, 3), 255, dtype=np.uint8)
        config = AugmentConfig(pad_pixels=4, horizontal_flip_probability=0.0)
        for seed in range(20):
            out = augment(image, config, np.random.default_rng(seed))
            zero_rows = int(np.sum(out[:, :, 0].max(axis=1) == 0))
            zero_cols = int(np.sum(out[:, :, 0].max(axis=0) == 0))
            assert zero_rows <= 4 and zero_cols <= 4
            assert np.all((out == 0) | (out == 255))

    def test_disabled_copies(self, image):
        out = augment(image, AugmentConfig(enabled=False), np.random.default_rng(0))
        assert np.array_equal(out, image) and out is not image

    def test_rejects_non_square(self):
        with pytest.raises(DataError):
            augment(np.zeros((10, 12, 3), dtype=np.uint8), AugmentConfig(), np.random.default_rng(0))

    def test_rejects_wrong_size(self):
        with pytest.raises(DataError):
            augment(np.zeros((28, 28, 3), dtype=np.uint8), AugmentConfig(), np.random.default_rng(0), input_size=32)

    def test_mirror_twice_restores_input(self, image):
        config = AugmentConfig(pad_pixels=0, horizontal_flip_probability=1.0)
        once = augment(image, config, np.random.default_rng(0))
        assert np.array_equal(augment(once, config, np.random.default_rng(1)), image)

    def test_crop_offsets_are_uniform(self):
        pad, size, draws = 4, 12, 10_000
        image = np.full((size, size, 1), 255, dtype=np.uint8)
        config = AugmentConfig(pad_pixels=pad, horizontal_flip_probability=0.0)
        counts = np.zeros((2 * pad + 1, 2 * pad + 1), dtype=int)
        for seed in range(draws):
            bright = augment(image, config, np.random.default_rng(seed))[:, :, 0] > 0
            rows = np.flatnonzero(bright.any(axis=1))
            cols = np.flatnonzero(bright.any(axis=0))
            # offset recovered from the zero border on either side
            top = pad - rows[0] + (size - 1 - rows[-1])
            left = pad - cols[0] + (size - 1 - cols[-1])
            counts[top, left] += 1
        expected = draws / counts.size
        assert counts.min() > 0.6 * expected and counts.max() < 1.4 * expected

    def test_bad_config(self):
        with pytest.raises(DataError):
            AugmentConfig(horizontal_flip_probability=1.5)


class TestDatasets:
    def test_array_dataset_item(self):
        images, ages = synth_arrays(4, seed=0, input_size=32)
        dataset = ArrayAgeDataset(images, ages, 32)
        image, age = dataset[1]
        assert tuple(image.shape) == (3, 32, 32)
        assert age.dtype == torch.float32
        assert age.item() == pytest.approx(ages[1])
        assert torch.equal(image, preprocess(images[1], 32))

    def test_augmentation_keyed_by_epoch_and_index(self):
        images, ages = synth_arrays(2, seed=0, input_size=32)
        dataset = ArrayAgeDataset(images, ages, 32, augment_config=AugmentConfig())
        dataset.set_epoch(1, seed=3)
        first = dataset[0][0]
        assert torch.equal(first, dataset[0][0])
        variants = []
        for epoch in range(2, 8):
            dataset.set_epoch(epoch)
            variants.append(dataset[0][0])
        assert any(not torch.equal(first, v) for v in variants)

    def test_without_augmentation(self):
        images, ages = synth_arrays(2, seed=0, input_size=32)
        dataset = ArrayAgeDataset(images, ages, 32, augment_config=AugmentConfig())
        plain = dataset.without_augmentation()
        assert torch.equal(plain[0][0], preprocess(images[0], 32))
        assert dataset.augment_config.enabled

    def test_length_mismatch(self):
        images, _ = synth_arrays(3, seed=0, input_size=32)
        with pytest.raises(DataError):
            ArrayAgeDataset(images, [1.0, 2.0], 32)

    def test_manifest_dataset_resizes(self, image_dir):
        dataset = ManifestAgeDataset(load_manifest(image_dir / "manifest.csv", image_dir), 32)
        assert len(dataset) == 2
        image, age = dataset[0]
        assert tuple(image.shape) == (3, 32, 32)
        assert age.item() == pytest.approx(44.3)


class TestSynthetic:
    def test_deterministic(self):
        a_images, a_ages = synth_arrays(5, seed=11)
        b_images, b_ages = synth_arrays(5, seed=11)
        assert np.array_equal(a_images, b_images) and np.array_equal(a_ages, b_ages)

    def test_shapes_and_label_range(self):
        images, ages = synth_arrays(50, seed=0, input_size=40)
        assert images.shape == (50, 40, 40, 3) and images.dtype == np.uint8
        assert ages.min() >= 1.0 and ages.max() <= 100.0
        assert np.allclose(ages, np.round(ages, 1))

    def test_age_is_recoverable(self):
        images, ages = synth_arrays(30, seed=4)
        decoded = np.array([decode_age(image) for image in images])
        assert np.max(np.abs(decoded - ages)) < 0.5

    def test_labels_without_rendering(self):
        assert np.array_equal(synth_ages(20, seed=9), synth_arrays(20, seed=9)[1])

    def test_pairs_form(self):
        pairs = synth_dataset(3, seed=0)
        assert isinstance(pairs[0][1], AgeLabel)

    def test_rejects_empty(self):
        with pytest.raises(DataError):
            synth_arrays(0, seed=0)

    def test_labels_fill_each_decade_evenly(self):
        ages = synth_ages(10_000, seed=0)
        counts, _ = np.histogram(ages, bins=np.linspace(1.0, 100.0, 11))
        assert np.all(np.abs(counts / len(ages) - 0.1) <= 0.02)

    def test_export_round_trips_through_manifest(self, tmp_path):
        manifest_path = export_synthetic(tmp_path / "synth", 6, seed=2)
        manifest = load_manifest(manifest_path, manifest_path.parent)
        assert len(manifest) == 6
        expected = synth_ages(6, seed=2)
        assert [r.apparent_age for r in manifest] == pytest.approx(expected.tolist())
        assert np.array_equal(decode_image(manifest_path.parent / manifest[0].image_path), synth_arrays(6, 2)[0][0])
