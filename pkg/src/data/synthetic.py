"""Synthetic face stand-ins whose age can be read back from pixel statistics.

Each image encodes its age twice: the red channel's background intensity rises
linearly with age, and a bright square in the green channel covers an area
fraction that rises linearly with age. The blue channel is distractor noise.
"""
import csv
import logging
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
from PIL import Image

from src.exceptions import DataError
from src.labels.granularity import AGE_MAX, AGE_MIN, AgeLabel
from src.data.dataset import MANIFEST_COLUMNS

logger = logging.getLogger(__name__)

INTENSITY_LOW = 20.0
INTENSITY_HIGH = 220.0
AREA_LOW = 0.05
AREA_HIGH = 0.95
NOISE_STD = 4.0


def _age_fraction(age: float) -> float:
    return (age - AGE_MIN) / (AGE_MAX - AGE_MIN)


def render_image(age: float, input_size: int, rng: np.random.Generator) -> np.ndarray:
    """
    Draw one synthetic image for an age.

    Args:
        age: Age in [AGE_MIN, AGE_MAX]
        input_size: Side length in pixels
        rng: Source of placement and noise randomness

    Returns:
        uint8 array of shape (input_size, input_size, 3)
    """
    frac = _age_fraction(age)
    size = input_size
    image = np.zeros((size, size, 3), dtype=np.float64)

    image[..., 0] = INTENSITY_LOW + (INTENSITY_HIGH - INTENSITY_LOW) * frac
    image[..., 0] += rng.normal(0.0, NOISE_STD, size=(size, size))

    area = AREA_LOW + (AREA_HIGH - AREA_LOW) * frac
    side = max(1, min(size, int(round(size * np.sqrt(area)))))
    top, left = rng.integers(0, size - side + 1, size=2)
    image[top:top + side, left:left + side, 1] = 255.0
    image[..., 1] += rng.normal(0.0, NOISE_STD, size=(size, size))

    image[..., 2] = rng.uniform(0.0, 255.0, size=(size, size))
    return np.clip(np.rint(image), 0, 255).astype(np.uint8)


def _draw_ages(rng: np.random.Generator, n: int) -> np.ndarray:
    return np.round(rng.uniform(AGE_MIN, AGE_MAX, size=n), 1)


def synth_ages(n: int, seed: int) -> np.ndarray:
    """Labels ``synth_arrays`` would produce for (n, seed), without rendering."""
    if n < 1:
        raise DataError(f"n must be >= 1, got {n}")
    return _draw_ages(np.random.default_rng(seed), n)


def synth_arrays(n: int, seed: int, input_size: int = 32) -> Tuple[np.ndarray, np.ndarray]:
    """
    Generate ``n`` images and their ages as arrays.

    Args:
        n: Number of samples
        seed: Seed; the output is a pure function of (n, seed, input_size)
        input_size: Image side length

    Returns:
        Tuple of (uint8 images N x S x S x 3, float64 ages)
    """
    if n < 1:
        raise DataError(f"n must be >= 1, got {n}")
    if input_size < 8:
        raise DataError(f"input_size too small for synthetic images: {input_size}")
    rng = np.random.default_rng(seed)
    ages = _draw_ages(rng, n)
    images = np.stack([render_image(age, input_size, rng) for age in ages])
    return images, ages


def synth_dataset(n: int, seed: int, input_size: int = 32) -> List[Tuple[np.ndarray, AgeLabel]]:
    """List form of ``synth_arrays``: ``(image, AgeLabel)`` pairs."""
    images, ages = synth_arrays(n, seed, input_size)
    return [(image, AgeLabel(float(age))) for image, age in zip(images, ages)]


def decode_age(image: np.ndarray) -> float:
    """Invert the red-channel encoding. Used by tests to check recoverability."""
    intensity = float(np.mean(image[..., 0]))
    frac = (intensity - INTENSITY_LOW) / (INTENSITY_HIGH - INTENSITY_LOW)
    return AGE_MIN + frac * (AGE_MAX - AGE_MIN)


def export_synthetic(out_dir: Union[str, Path], n: int, seed: int, input_size: int = 32) -> Path:
    """
    Write synthetic PNG images and a manifest so the file-based pipeline can run.

    Args:
        out_dir: Target directory (created if needed)
        n: Number of samples
        seed: Generation seed
        input_size: Image side length

    Returns:
        Path of the written ``manifest.csv``
    """
    out = Path(out_dir)
    images_dir = out / "images"
    try:
        images_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"Cannot create output directory {out}: {e}") from e

    images, ages = synth_arrays(n, seed, input_size)
    manifest_path = out / "manifest.csv"
    with open(manifest_path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for i, (image, age) in enumerate(zip(images, ages)):
            rel_path = f"images/{i:06d}.png"
            Image.fromarray(image).save(out / rel_path)
            writer.writerow([rel_path, f"{age:.1f}", ""])
    logger.info("Wrote %d synthetic images and %s", n, manifest_path)
    return manifest_path
