"""Manifest ingestion, preprocessing, augmentation and torch datasets."""
import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError
from torch.utils.data import Dataset
from torchvision.transforms import functional as TF

from src.exceptions import DataError, ImageDecodeError, ManifestParseError
from src.labels.granularity import AGE_MAX, AGE_MIN, round_age

logger = logging.getLogger(__name__)

MANIFEST_COLUMNS = ("image_path", "apparent_age", "stddev")
# Default normalization maps [0, 255] to [-1, 1]
DEFAULT_MEAN = 0.5
DEFAULT_STD = 0.5


@dataclass(frozen=True)
class SampleRecord:
    """One row of a dataset manifest."""

    image_path: str
    apparent_age: float
    annotator_stddev: Optional[float] = None


@dataclass(frozen=True)
class AugmentConfig:
    """Random zero-padded crop followed by a random horizontal flip."""

    pad_pixels: int = 4
    horizontal_flip_probability: float = 0.5
    enabled: bool = True

    def __post_init__(self):
        if self.pad_pixels < 0:
            raise DataError(f"pad_pixels must be >= 0, got {self.pad_pixels}")
        if not 0.0 <= self.horizontal_flip_probability <= 1.0:
            raise DataError(
                f"horizontal_flip_probability must be in [0, 1], got {self.horizontal_flip_probability}"
            )


@dataclass
class Manifest:
    """Parsed manifest: usable records plus rows that could not be used."""

    path: str
    images_root: str
    records: List[SampleRecord] = field(default_factory=list)
    failures: List[Tuple[int, str]] = field(default_factory=list)
    clamped: int = 0

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[SampleRecord]:
        return iter(self.records)

    def __getitem__(self, index: int) -> SampleRecord:
        return self.records[index]


def _parse_float(text: str, path: str, line: int, column: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ManifestParseError(path, line, f"{column} {text!r} is not a number") from None
    if not math.isfinite(value):
        raise ManifestParseError(path, line, f"{column} {text!r} is not finite")
    return value


def load_manifest(manifest_path: Union[str, Path], images_root: Union[str, Path]) -> Manifest:
    """
    Load a ``image_path,apparent_age[,stddev]`` manifest.

    Args:
        manifest_path: UTF-8 CSV with a header line
        images_root: Directory the image paths are relative to

    Returns:
        Manifest with records in file order; rows whose image is missing are
        listed in ``failures`` instead

    Raises:
        ManifestParseError: on a malformed row (with its line number)
        DataError: if the manifest is missing or has no rows
    """
    path = Path(manifest_path)
    root = Path(images_root).resolve()
    if not path.is_file():
        raise DataError(f"Manifest not found: {path}")

    manifest = Manifest(str(path), str(root))
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            raise DataError(f"Manifest is empty: {path}")
        header = [h.strip().lower() for h in header]
        if header[:2] != list(MANIFEST_COLUMNS[:2]) or len(header) > 3:
            raise ManifestParseError(
                str(path), 1, f"header must be {','.join(MANIFEST_COLUMNS[:2])}[,stddev], got {header}"
            )
        rows = 0
        for row in reader:
            line = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                continue
            rows += 1
            if len(row) not in (2, 3):
                raise ManifestParseError(str(path), line, f"expected 2 or 3 fields, got {len(row)}")
            rel_path = row[0].strip()
            if not rel_path:
                raise ManifestParseError(str(path), line, "empty image_path")
            age = _parse_float(row[1].strip(), str(path), line, "apparent_age")
            stddev = None
            if len(row) == 3 and row[2].strip():
                stddev = _parse_float(row[2].strip(), str(path), line, "stddev")

            image_file = (root / rel_path).resolve()
            if root not in image_file.parents:
                raise ManifestParseError(str(path), line, f"{rel_path} resolves outside {root}")
            if not image_file.is_file():
                manifest.failures.append((line, f"missing image {rel_path}"))
                continue
            if not AGE_MIN <= round_age(age) <= AGE_MAX:
                manifest.clamped += 1
            manifest.records.append(SampleRecord(rel_path, age, stddev))

    if rows == 0:
        raise DataError(f"Manifest has no rows: {path}")
    logger.info("Loaded %d records from %s", len(manifest.records), path)
    if manifest.failures:
        logger.warning("%d manifest rows skipped in %s: %s", len(manifest.failures), path, manifest.failures[:5])
    if manifest.clamped:
        logger.warning("%d ages outside [%d, %d] will be clamped", manifest.clamped, AGE_MIN, AGE_MAX)
    return manifest


def decode_image(path: Union[str, Path]) -> np.ndarray:
    """Decode any raster file to a uint8 H x W x 3 array."""
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
    except (OSError, UnidentifiedImageError, ValueError) as e:
        raise ImageDecodeError(str(path), str(e)) from e


def resize_image(image: np.ndarray, input_size: int) -> np.ndarray:
    """Bilinear resize to ``input_size`` x ``input_size``; no-op if already that size."""
    if image.shape[0] == input_size and image.shape[1] == input_size:
        return image
    resized = Image.fromarray(image).resize((input_size, input_size), Image.BILINEAR)
    return np.asarray(resized, dtype=np.uint8)


def to_tensor(image: np.ndarray, mean: float = DEFAULT_MEAN, std: float = DEFAULT_STD) -> torch.Tensor:
    """uint8 H x W x 3 array to a normalized float32 3 x H x W tensor."""
    tensor = TF.to_tensor(np.ascontiguousarray(image))
    return TF.normalize(tensor, [mean] * 3, [std] * 3)


def preprocess(
    image: Union[str, Path, np.ndarray],
    input_size: int,
    mean: float = DEFAULT_MEAN,
    std: float = DEFAULT_STD,
) -> torch.Tensor:
    """
    Decode (if given a path), resize and normalize one image.

    Args:
        image: File path or uint8 H x W x 3 array
        input_size: Output side length in pixels
        mean: Per-channel mean subtracted after scaling to [0, 1]
        std: Per-channel divisor

    Returns:
        Float tensor of shape (3, input_size, input_size)
    """
    if isinstance(image, (str, Path)):
        image = decode_image(image)
    return to_tensor(resize_image(image, input_size), mean, std)


def augment(
    image: np.ndarray,
    config: AugmentConfig,
    rng: np.random.Generator,
    input_size: Optional[int] = None,
) -> np.ndarray:
    """
    Zero-pad, randomly crop back to size, then randomly mirror.

    Args:
        image: Square H x W x C array
        config: Augmentation settings
        rng: Generator; the result is a pure function of its state
        input_size: Expected side length, checked when given

    Returns:
        Array with the same shape and dtype as ``image``
    """
    if image.ndim != 3 or image.shape[0] != image.shape[1]:
        raise DataError(f"augment expects a square H x W x C image, got shape {image.shape}")
    if input_size is not None and image.shape[0] != input_size:
        raise DataError(f"augment expects a {input_size} x {input_size} image, got shape {image.shape}")
    if not config.enabled:
        return image.copy()
    size = image.shape[0]
    pad = config.pad_pixels
    top, left = rng.integers(0, 2 * pad + 1, size=2)
    flip = rng.random() < config.horizontal_flip_probability
    out = image
    if pad:
        padded = np.pad(image, ((pad, pad), (pad, pad), (0, 0)), mode="constant")
        out = padded[top:top + size, left:left + size]
    if flip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


class AgeDataset(Dataset):
    """Base dataset yielding ``(normalized image, age)`` pairs.

    Augmentation randomness for sample ``i`` in epoch ``e`` comes from
    ``default_rng([seed, e, i])`` so the stream does not depend on worker count.
    """

    def __init__(
        self,
        ages: Sequence[float],
        input_size: int,
        augment_config: Optional[AugmentConfig] = None,
        mean: float = DEFAULT_MEAN,
        std: float = DEFAULT_STD,
    ):
        self.ages = np.asarray(ages, dtype=np.float64)
        self.input_size = input_size
        self.augment_config = augment_config or AugmentConfig(enabled=False)
        self.mean = mean
        self.std = std
        self.seed = 0
        self.epoch = 0

    def __len__(self) -> int:
        return len(self.ages)

    def load_image(self, index: int) -> np.ndarray:
        raise NotImplementedError

    def set_epoch(self, epoch: int, seed: Optional[int] = None) -> None:
        self.epoch = epoch
        if seed is not None:
            self.seed = seed

    def without_augmentation(self) -> "AgeDataset":
        view = copy.copy(self)
        view.augment_config = AugmentConfig(enabled=False)
        return view

    def __getitem__(self, index: int) -> Tuple[torch.Tensor, torch.Tensor]:
        image = self.load_image(index)
        if self.augment_config.enabled:
            rng = np.random.default_rng([self.seed, self.epoch, index])
            image = augment(image, self.augment_config, rng, self.input_size)
        return to_tensor(image, self.mean, self.std), torch.tensor(self.ages[index], dtype=torch.float32)


class ArrayAgeDataset(AgeDataset):
    """In-memory uint8 images (N x H x W x 3)."""

    def __init__(self, images: np.ndarray, ages: Sequence[float], input_size: int, **kwargs):
        super().__init__(ages, input_size, **kwargs)
        if len(images) != len(self.ages):
            raise DataError(f"{len(images)} images but {len(self.ages)} ages")
        if len(images) and images.shape[1:3] != (input_size, input_size):
            images = np.stack([resize_image(img, input_size) for img in images])
        self.images = images

    def load_image(self, index: int) -> np.ndarray:
        return self.images[index]


class ManifestAgeDataset(AgeDataset):
    """Images decoded from disk on access, in manifest order."""

    def __init__(self, manifest: Manifest, input_size: int, **kwargs):
        super().__init__([r.apparent_age for r in manifest.records], input_size, **kwargs)
        self.root = Path(manifest.images_root)
        self.paths = [r.image_path for r in manifest.records]

    def load_image(self, index: int) -> np.ndarray:
        return resize_image(decode_image(self.root / self.paths[index]), self.input_size)


@dataclass
class DatasetSplits:
    """Train / validation / test datasets used by one experiment."""

    train: AgeDataset
    val: AgeDataset
    test: Optional[AgeDataset] = None

    @property
    def eval_split(self) -> AgeDataset:
        """Split used for reported MAE: test if present, else validation."""
        return self.test if self.test is not None else self.val
