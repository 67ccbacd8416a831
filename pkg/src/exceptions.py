"""Error hierarchy shared by all granage modules."""
from typing import List, Optional, Sequence

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class GranageError(Exception):
    """Base class for every error raised by the framework."""


class GranularityError(GranageError, ValueError):
    """Invalid granularity spec, class index or age."""


class LossInputError(GranageError, ValueError):
    """Invalid loss input: bad target, non-finite value or missing branch."""

    def __init__(self, message: str, branch: Optional[str] = None):
        super().__init__(message)
        self.branch = branch


class ModelError(GranageError, ValueError):
    """Invalid model spec or missing branch."""


class ShapeError(ModelError):
    """Input batch does not match the model's expected shape."""

    def __init__(self, expected: Sequence, actual: Sequence):
        super().__init__(f"Expected input shape {tuple(expected)}, got {tuple(actual)}")
        self.expected = tuple(expected)
        self.actual = tuple(actual)


class DataError(GranageError):
    """Dataset ingestion failure."""


class ManifestParseError(DataError):
    """A manifest row could not be parsed."""

    def __init__(self, path: str, line: int, reason: str):
        super().__init__(f"{path}:{line}: {reason}")
        self.path = path
        self.line = line


class ImageDecodeError(DataError):
    """An image file could not be decoded."""

    def __init__(self, path: str, reason: str):
        super().__init__(f"Cannot decode image {path}: {reason}")
        self.path = path


class TrainingDivergedError(GranageError):
    """Loss became non-finite during training."""

    def __init__(self, epoch: int, step: int, checkpoint: Optional[str] = None):
        message = f"Non-finite loss at epoch {epoch}, step {step}"
        if checkpoint:
            message += f"; last finite checkpoint kept at {checkpoint}"
        super().__init__(message)
        self.epoch = epoch
        self.step = step
        self.checkpoint = checkpoint


class EvaluationError(GranageError, ValueError):
    """Invalid metric input, e.g. empty or mismatched prediction lists."""


class CheckpointError(GranageError):
    """Checkpoint file is missing, truncated or malformed."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written by an incompatible format version."""

    def __init__(self, found: str, expected: str):
        super().__init__(f"Checkpoint version {found!r} is not supported (expected {expected!r})")
        self.found = found
        self.expected = expected


class ConfigError(GranageError):
    """Run configuration failed validation; carries every problem found."""

    def __init__(self, messages: List[str]):
        super().__init__("; ".join(messages))
        self.messages = list(messages)


def exit_code_for(exc: BaseException) -> int:
    """
    Map an exception to the CLI exit-code contract.

    Args:
        exc: Exception raised by a command

    Returns:
        1 for usage/config errors, 2 for anything else
    """
    if isinstance(exc, ConfigError):
        return EXIT_USAGE
    return EXIT_RUNTIME
