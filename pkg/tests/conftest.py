"""Shared fixtures: tiny synthetic splits and CPU-sized configs."""
import numpy as np
import pytest
from PIL import Image

from src.data.dataset import ArrayAgeDataset, AugmentConfig, DatasetSplits
from src.data.synthetic import synth_arrays
from src.losses.multi_loss import LossConfig
from src.models.age_granularity_net import ModelSpec
from src.training.trainer import TrainConfig

SIZE = 32


@pytest.fixture
def small_spec():
    return ModelSpec(backbone_id="desk", input_size=SIZE)


@pytest.fixture
def small_splits():
    def make(n, seed, augment):
        images, ages = synth_arrays(n, seed, SIZE)
        return ArrayAgeDataset(images, ages, SIZE, augment_config=AugmentConfig(enabled=augment))

    return DatasetSplits(make(24, 0, True), make(8, 1, False), make(8, 2, False))


@pytest.fixture
def fast_config():
    return TrainConfig(max_epochs=2, batch_size=8, seed=0, loss_config=LossConfig())


@pytest.fixture
def image_dir(tmp_path):
    """Directory with two small PNGs and a valid manifest."""
    rng = np.random.default_rng(0)
    (tmp_path / "images").mkdir()
    for name, shape in (("a.png", (40, 30, 3)), ("b.png", (32, 32, 3))):
        pixels = rng.integers(0, 256, size=shape, dtype=np.uint8)
        Image.fromarray(pixels).save(tmp_path / "images" / name)
    manifest = tmp_path / "manifest.csv"
    manifest.write_text(
        "image_path,apparent_age,stddev\n"
        "images/a.png,44.3,3.1\n"
        "images/b.png,12,\n",
        encoding="utf-8",
    )
    return tmp_path
