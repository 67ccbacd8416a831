"""Seeded training loop with plateau schedule, history capture and checkpoints."""
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
import torch
from torch import nn
from torch.utils.data import DataLoader
from tqdm.auto import tqdm

from src.data.dataset import AgeDataset
from src.exceptions import (
    CheckpointError,
    CheckpointVersionError,
    ConfigError,
    GranageError,
    ModelError,
    TrainingDivergedError,
)
from src.labels.granularity import CANONICAL_WIDTHS
from src.losses.multi_loss import REGRESSION, LossConfig, MultiGranularityLoss, branch_key
from src.models.age_granularity_net import AgeGranularityNet, ModelSpec, build_model
from src.training.scheduler import plateau_lr

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "GRANAGE-CKPT-1"
BRANCH_COLUMNS = [f"loss_{branch_key(w)}" for w in CANONICAL_WIDTHS] + [f"loss_{REGRESSION}"]
HISTORY_COLUMNS = ["epoch", "lr", "train_loss", "val_loss", *BRANCH_COLUMNS, "steps", "optimizer"]
TIMING_COLUMNS = ["epoch", "seconds"]

OPTIMIZERS = ("adam", "sgd")


@dataclass
class TrainConfig:
    """Optimization settings for one training run."""

    initial_lr: float = 1e-3
    plateau_patience_epochs: int = 8
    lr_decay_factor: float = 10.0
    max_epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    loss_config: LossConfig = field(default_factory=LossConfig)
    optimizer_id: str = "adam"
    weight_decay: float = 0.0
    momentum: float = 0.9
    early_stop_patience: Optional[int] = None
    num_workers: int = 0
    progress: bool = False

    def __post_init__(self):
        problems = []
        if not self.initial_lr > 0:
            problems.append(f"initial_lr must be > 0, got {self.initial_lr}")
        if self.plateau_patience_epochs < 1:
            problems.append(f"plateau_patience_epochs must be >= 1, got {self.plateau_patience_epochs}")
        if not self.lr_decay_factor > 1:
            problems.append(f"lr_decay_factor must be > 1, got {self.lr_decay_factor}")
        if self.max_epochs < 1:
            problems.append(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer_id not in OPTIMIZERS:
            problems.append(f"optimizer_id must be one of {OPTIMIZERS}, got {self.optimizer_id!r}")
        if problems:
            raise ConfigError(problems)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        loss = self.loss_config
        data["loss_config"] = {
            "active_granularities": list(loss.active_granularities),
            "use_regression": loss.use_regression,
            "lam": loss.lam,
        }
        return data


@dataclass
class EpochRecord:
    """Metrics of one completed epoch."""

    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    branch_losses: Dict[str, float]
    steps: int
    optimizer: str
    seconds: float = 0.0


@dataclass
class TrainHistory:
    """Per-epoch records, in order."""

    records: List[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: EpochRecord) -> None:
        self.records.append(record)

    @property
    def best_val_loss(self) -> float:
        return min((r.val_loss for r in self.records), default=math.inf)

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for r in self.records:
            row = {"epoch": r.epoch, "lr": r.lr, "train_loss": r.train_loss, "val_loss": r.val_loss}
            for column in BRANCH_COLUMNS:
                row[column] = r.branch_losses.get(column[len("loss_"):], np.nan)
            row["steps"] = r.steps
            row["optimizer"] = r.optimizer
            rows.append(row)
        return pd.DataFrame(rows, columns=HISTORY_COLUMNS)

    def write_csv(self, path: Union[str, Path]) -> None:
        """
        Write ``history.csv`` plus a sibling ``timing.csv`` with wall times.

        Wall times live in their own file so the history file is reproducible
        byte for byte.
        """
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, lineterminator="\n")
        timing = pd.DataFrame([(r.epoch, r.seconds) for r in self.records], columns=TIMING_COLUMNS)
        timing.to_csv(path.with_name("timing.csv"), index=False, lineterminator="\n")

    def to_dicts(self) -> List[Dict[str, Any]]:
        return [asdict(r) for r in self.records]

    @classmethod
    def from_dicts(cls, rows: List[Dict[str, Any]]) -> "TrainHistory":
        return cls([EpochRecord(**row) for row in rows])


def make_optimizer(params, config: TrainConfig) -> torch.optim.Optimizer:
    if config.optimizer_id == "sgd":
        return torch.optim.SGD(
            params, lr=config.initial_lr, momentum=config.momentum, weight_decay=config.weight_decay
        )
    return torch.optim.Adam(params, lr=config.initial_lr, weight_decay=config.weight_decay)


def save_checkpoint(
    model: AgeGranularityNet,
    history: TrainHistory,
    path: Union[str, Path],
    optimizer: Optional[torch.optim.Optimizer] = None,
    config: Optional[TrainConfig] = None,
) -> Path:
    """
    Serialize model, history and schedule state into one archive.

    Args:
        model: Model to save
        history: History so far; its length is the checkpoint epoch
        path: Destination file
        optimizer: Optimizer whose state should be resumed
        config: Training config, stored for reference

    Returns:
        Path written
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "magic": CHECKPOINT_MAGIC,
        "model_spec": model.spec.to_dict(),
        "state_dict": model.state_dict(),
        "epoch": len(history),
        "history": history.to_dicts(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "torch_rng": torch.get_rng_state(),
        "train_config": config.to_dict() if config is not None else None,
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def read_checkpoint(path: Union[str, Path]) -> Dict[str, Any]:
    """
    Load and validate a checkpoint archive.

    Raises:
        CheckpointError: if the file is missing, truncated or not a checkpoint
        CheckpointVersionError: if it was written by another format version
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"Checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or "magic" not in payload:
        raise CheckpointError(f"{path} is not a granage checkpoint")
    if payload["magic"] != CHECKPOINT_MAGIC:
        raise CheckpointVersionError(str(payload["magic"]), CHECKPOINT_MAGIC)
    missing = {"model_spec", "state_dict", "epoch", "history"} - set(payload)
    if missing:
        raise CheckpointError(f"{path} lacks {sorted(missing)}")
    return payload


def load_checkpoint(path: Union[str, Path]) -> Tuple[AgeGranularityNet, TrainHistory]:
    """
    Rebuild a model and its history from a checkpoint.

    Args:
        path: Checkpoint file

    Returns:
        Tuple of (model with restored parameters, history)
    """
    payload = read_checkpoint(path)
    spec = ModelSpec.from_dict(payload["model_spec"])
    # weights come from the checkpoint, not from the pretrained file
    spec = replace(spec, pretrained=False)
    model = build_model(spec, seed=0)
    try:
        model.load_state_dict(payload["state_dict"])
    except RuntimeError as e:
        raise CheckpointError(f"Parameters in {path} do not match its model spec: {e}") from e
    return model, TrainHistory.from_dicts(payload["history"])


def check_branches(model: AgeGranularityNet, loss_config: LossConfig) -> None:
    """Raise ModelError if the model lacks a branch the loss needs."""
    for width in loss_config.active_granularities:
        if branch_key(width) not in model.heads:
            raise ModelError(f"model has no branch {width} required by the loss")
    if loss_config.use_regression and model.regression is None:
        raise ModelError(f"model has no branch {REGRESSION} required by the loss")


def set_train_mode(model: nn.Module) -> None:
    """
    Switch to training mode.

    Batch norms whose affine parameters are all frozen stay in eval mode, so
    their running statistics are frozen too.
    """
    model.train()
    for module in model.modules():
        if isinstance(module, (nn.BatchNorm1d, nn.BatchNorm2d)):
            params = list(module.parameters(recurse=False))
            if params and not any(p.requires_grad for p in params):
                module.eval()


def _loader(dataset: AgeDataset, config: TrainConfig, order: Optional[List[int]] = None) -> DataLoader:
    return DataLoader(
        dataset,
        batch_size=config.batch_size,
        sampler=order if order is not None else list(range(len(dataset))),
        num_workers=config.num_workers,
    )


def evaluate_loss(
    model: AgeGranularityNet, dataset: AgeDataset, criterion: MultiGranularityLoss, config: TrainConfig
) -> Tuple[float, Dict[str, float]]:
    """Sample-weighted mean aggregate and per-branch losses with augmentation off."""
    was_training = model.training
    model.eval()
    total = 0.0
    branch_sums: Dict[str, float] = {}
    try:
        with torch.no_grad():
            for images, ages in _loader(dataset.without_augmentation(), config):
                loss, per_branch = criterion(model(images), ages)
                total += loss.item() * len(ages)
                for branch, value in per_branch.items():
                    key = str(branch) if branch == REGRESSION else branch_key(branch)
                    branch_sums[key] = branch_sums.get(key, 0.0) + value.item() * len(ages)
    finally:
        model.train(was_training)
    n = len(dataset)
    return total / n, {k: v / n for k, v in branch_sums.items()}


def train(
    model: AgeGranularityNet,
    train_set: AgeDataset,
    val_set: AgeDataset,
    config: TrainConfig,
    output_dir: Optional[Union[str, Path]] = None,
    resume_from: Optional[Union[str, Path]] = None,
) -> Tuple[AgeGranularityNet, TrainHistory]:
    """
    Minimize the aggregate loss over ``max_epochs`` seeded epochs.

    Args:
        model: Model to fit; owned exclusively by this call
        train_set: Training split (augmentation per its config)
        val_set: Validation split (evaluated without augmentation)
        config: Training config
        output_dir: If given, receives ``last.ckpt``, ``best.ckpt`` and ``history.csv``
        resume_from: Checkpoint to continue from

    Returns:
        Tuple of (trained model, history)
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise GranageError("training and validation splits must be non-empty")
    check_branches(model, config.loss_config)

    criterion = MultiGranularityLoss(config.loss_config)
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = make_optimizer(params, config) if params else None
    history = TrainHistory()
    out = Path(output_dir) if output_dir is not None else None
    last_path = out / "last.ckpt" if out is not None else None

    torch.manual_seed(config.seed)
    if resume_from is not None:
        payload = read_checkpoint(resume_from)
        try:
            model.load_state_dict(payload["state_dict"])
            if optimizer is not None and payload.get("optimizer") is not None:
                optimizer.load_state_dict(payload["optimizer"])
        except (RuntimeError, ValueError, KeyError) as e:
            raise CheckpointError(f"Checkpoint {resume_from} does not match the model being trained: {e}") from e
        history = TrainHistory.from_dicts(payload["history"])
        if payload.get("torch_rng") is not None:
            torch.set_rng_state(payload["torch_rng"])
        logger.info("Resumed from %s at epoch %d", resume_from, len(history))

    for epoch in range(len(history) + 1, config.max_epochs + 1):
        lr = plateau_lr(history, config)
        if optimizer is not None:
            for group in optimizer.param_groups:
                group["lr"] = lr
        start = time.perf_counter()
        train_set.set_epoch(epoch, config.seed)
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train_set)).tolist()

        set_train_mode(model)
        total = 0.0
        branch_sums: Dict[str, float] = {}
        steps = 0
        batches = tqdm(
            _loader(train_set, config, order),
            desc=f"epoch {epoch}",
            leave=False,
            disable=None if config.progress else True,
        )
        for images, ages in batches:
            steps += 1
            loss, per_branch = criterion(model(images), ages)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    epoch, steps, str(last_path) if last_path is not None and last_path.exists() else None
                )
            if optimizer is not None:
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
            total += loss.item() * len(ages)
            for branch, value in per_branch.items():
                key = str(branch) if branch == REGRESSION else branch_key(branch)
                branch_sums[key] = branch_sums.get(key, 0.0) + value.item() * len(ages)

        val_loss, _ = evaluate_loss(model, val_set, criterion, config)
        if not math.isfinite(val_loss):
            raise TrainingDivergedError(
                epoch, steps, str(last_path) if last_path is not None and last_path.exists() else None
            )
        n = len(train_set)
        record = EpochRecord(
            epoch=epoch,
            lr=lr,
            train_loss=total / n,
            val_loss=val_loss,
            branch_losses={k: v / n for k, v in branch_sums.items()},
            steps=steps,
            optimizer=config.optimizer_id,
            seconds=time.perf_counter() - start,
        )
        improved = val_loss < history.best_val_loss
        history.append(record)
        logger.info(
            "epoch %d lr %.1e train %.4f val %.4f (%.1fs)",
            epoch, lr, record.train_loss, val_loss, record.seconds,
        )

        if out is not None:
            save_checkpoint(model, history, last_path, optimizer, config)
            if improved:
                save_checkpoint(model, history, out / "best.ckpt", optimizer, config)
            history.write_csv(out / "history.csv")

        if config.early_stop_patience is not None:
            since_best = len(history) - 1 - int(np.argmin([r.val_loss for r in history.records]))
            if since_best >= config.early_stop_patience:
                logger.info("Early stop: no validation improvement for %d epochs", since_best)
                break

    return model, history
