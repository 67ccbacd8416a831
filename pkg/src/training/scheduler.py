"""Reduce-on-plateau learning rate as a pure function of the validation history."""
import math
from typing import TYPE_CHECKING, Iterable, Sequence, Union

if TYPE_CHECKING:
    from src.training.trainer import EpochRecord, TrainConfig, TrainHistory


def decay_count(val_losses: Iterable[float], patience: int) -> int:
    """
    Count completed stagnation windows.

    A window is ``patience`` consecutive epochs without strict improvement over
    the best validation loss seen since the previous decay.
    """
    decays = 0
    best = math.inf
    stale = 0
    for loss in val_losses:
        if loss < best:
            best = loss
            stale = 0
            continue
        stale += 1
        if stale >= patience:
            decays += 1
            best = math.inf
            stale = 0
    return decays


def plateau_lr(history: Union["TrainHistory", Sequence["EpochRecord"]], config: "TrainConfig") -> float:
    """
    Learning rate for the next epoch.

    Args:
        history: TrainHistory (or any sequence of records with ``val_loss``)
        config: TrainConfig

    Returns:
        ``initial_lr / lr_decay_factor ** d`` for ``d`` completed windows
    """
    records = getattr(history, "records", history)
    decays = decay_count((r.val_loss for r in records), config.plateau_patience_epochs)
    return config.initial_lr / config.lr_decay_factor ** decays
