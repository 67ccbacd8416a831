"""Mapping between continuous ages and class indices at several granularities."""
import math
from dataclasses import dataclass
from typing import Dict, Iterable, Tuple, Union

import numpy as np

from src.exceptions import GranularityError

AGE_MIN = 1
AGE_MAX = 100
CANONICAL_WIDTHS: Tuple[int, ...] = (1, 5, 10, 20)


@dataclass(frozen=True)
class GranularitySpec:
    """A bin width over a contiguous integer age range."""

    bin_width: int
    num_classes: int
    age_min: int = AGE_MIN
    age_max: int = AGE_MAX

    @property
    def label(self) -> str:
        """Column label used in reports, e.g. ``100-classes``."""
        return f"{self.num_classes}-classes"


@dataclass(frozen=True)
class AgeLabel:
    """Apparent age in years, as annotated."""

    apparent_age: float


AgeLike = Union[float, int, AgeLabel]


def make_spec(bin_width: int, age_min: int = AGE_MIN, age_max: int = AGE_MAX) -> GranularitySpec:
    """
    Build a granularity spec for the given bin width.

    Args:
        bin_width: Width of each class in years
        age_min: Lowest age in the grid
        age_max: Highest age in the grid

    Returns:
        GranularitySpec with the derived class count

    Raises:
        GranularityError: if the width does not divide the age range exactly
    """
    if isinstance(bin_width, bool) or not isinstance(bin_width, (int, np.integer)):
        raise GranularityError(f"bin_width must be an integer, got {bin_width!r}")
    if age_max < age_min:
        raise GranularityError(f"age_max ({age_max}) is below age_min ({age_min})")
    if bin_width < 1:
        raise GranularityError(f"bin_width must be >= 1, got {bin_width}")
    span = age_max - age_min + 1
    if span % bin_width != 0:
        raise GranularityError(
            f"bin_width {bin_width} does not divide the age range {age_min}..{age_max} ({span} years)"
        )
    return GranularitySpec(int(bin_width), span // int(bin_width), age_min, age_max)


def canonical_specs() -> Dict[int, GranularitySpec]:
    """Specs for the 1/5/10/20-year grid, keyed by bin width."""
    return {width: make_spec(width) for width in CANONICAL_WIDTHS}


def round_age(age: float) -> int:
    """Round half away from zero."""
    if age >= 0:
        return int(math.floor(age + 0.5))
    return -int(math.floor(-age + 0.5))


def _as_float(age: AgeLike) -> float:
    value = age.apparent_age if isinstance(age, AgeLabel) else age
    value = float(value)
    if not math.isfinite(value):
        raise GranularityError(f"age must be finite, got {value}")
    return value


def clamp_age(age: AgeLike, spec: GranularitySpec) -> Tuple[int, bool]:
    """
    Round an age and clamp it into the spec's range.

    Args:
        age: Apparent age
        spec: Granularity spec providing the range

    Returns:
        Tuple of (clamped integer age, whether clamping changed it)
    """
    rounded = round_age(_as_float(age))
    clamped = min(max(rounded, spec.age_min), spec.age_max)
    return clamped, clamped != rounded


def quantize(age: AgeLike, spec: GranularitySpec) -> int:
    """
    Zero-based class index of an age at the spec's granularity.

    Args:
        age: Apparent age (fractional ages are rounded, out-of-range ages clamped)
        spec: Granularity spec

    Returns:
        Class index in [0, num_classes)
    """
    clamped, _ = clamp_age(age, spec)
    return (clamped - spec.age_min) // spec.bin_width


def quantize_array(ages: Iterable[float], spec: GranularitySpec) -> np.ndarray:
    """Vectorized ``quantize`` returning an int64 array."""
    values = np.asarray(ages, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise GranularityError("ages must be finite")
    rounded = np.where(values >= 0, np.floor(values + 0.5), -np.floor(-values + 0.5))
    clamped = np.clip(rounded, spec.age_min, spec.age_max).astype(np.int64)
    return (clamped - spec.age_min) // spec.bin_width


def representative(class_index: int, spec: GranularitySpec) -> float:
    """
    Mean of the integer ages that fall into a class.

    Args:
        class_index: Zero-based class index
        spec: Granularity spec

    Returns:
        Representative age in years
    """
    if not 0 <= class_index < spec.num_classes:
        raise GranularityError(
            f"class_index {class_index} out of range for {spec.num_classes} classes"
        )
    return spec.age_min + class_index * spec.bin_width + (spec.bin_width - 1) / 2.0


def representatives(spec: GranularitySpec) -> np.ndarray:
    """Representative ages for every class of a spec, as float64."""
    return spec.age_min + np.arange(spec.num_classes) * spec.bin_width + (spec.bin_width - 1) / 2.0


def coarsen(fine_index: int, fine: GranularitySpec, coarse: GranularitySpec) -> int:
    """
    Map a fine class index to the coarse class containing it.

    Args:
        fine_index: Class index at the fine granularity
        fine: Fine spec
        coarse: Coarse spec; its width must be a multiple of the fine width

    Returns:
        Class index at the coarse granularity
    """
    if (fine.age_min, fine.age_max) != (coarse.age_min, coarse.age_max):
        raise GranularityError("fine and coarse specs cover different age ranges")
    if coarse.bin_width % fine.bin_width != 0:
        raise GranularityError(
            f"width {coarse.bin_width} is not a multiple of width {fine.bin_width}; specs are not nested"
        )
    if not 0 <= fine_index < fine.num_classes:
        raise GranularityError(
            f"fine_index {fine_index} out of range for {fine.num_classes} classes"
        )
    return (fine_index * fine.bin_width) // coarse.bin_width
