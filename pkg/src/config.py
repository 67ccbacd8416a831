"""Configuration management for granage."""
import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from src.data.dataset import DEFAULT_MEAN, DEFAULT_STD, AugmentConfig
from src.exceptions import ConfigError
from src.labels.granularity import CANONICAL_WIDTHS
from src.losses.multi_loss import LossConfig
from src.models.age_granularity_net import DEFAULT_POLICY, POLICIES, ModelSpec
from src.models.backbones import BACKBONES, MIN_INPUT_SIZE
from src.training.trainer import OPTIMIZERS, TrainConfig

# Load environment variables
load_dotenv()


class Settings(BaseSettings):
    """Process-wide settings from the environment or a ``.env`` file."""

    model_config = SettingsConfigDict(env_prefix="GRANAGE_", env_file=".env", extra="ignore")

    # Default output root (GRANAGE_OUT)
    out: str = "./runs"
    log_level: str = "INFO"
    # 0 leaves torch's default thread count
    num_threads: int = 0


# Create settings instance
settings = Settings()


class RunConfig(BaseModel):
    """Flat run configuration file. Unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    # Model
    backbone: str = "desk"
    input_size: int = 224
    branch_widths: List[int] = list(CANONICAL_WIDTHS)
    with_regression: bool = True
    pretrained: bool = False
    pretrained_weights: Optional[str] = None

    # Loss; None means "every built branch"
    loss_widths: Optional[List[int]] = None
    use_regression: Optional[bool] = None
    loss_lambda: float = 1.0

    # Training
    initial_lr: float = 1e-3
    plateau_patience_epochs: int = 8
    lr_decay_factor: float = 10.0
    max_epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    optimizer: str = "adam"
    weight_decay: float = 0.0
    momentum: float = 0.9
    early_stop_patience: Optional[int] = None
    num_workers: int = 0
    # tqdm bars over batches; hidden when stderr is not a terminal
    progress: bool = True

    # Augmentation and normalization
    augment: bool = True
    pad_pixels: int = 4
    flip_probability: float = 0.5
    norm_mean: float = DEFAULT_MEAN
    norm_std: float = DEFAULT_STD

    # Data: manifests, or synthetic splits when no manifest is given
    images_root: Optional[str] = None
    train_manifest: Optional[str] = None
    val_manifest: Optional[str] = None
    test_manifest: Optional[str] = None
    synthetic_train: int = 2000
    synthetic_val: int = 500
    synthetic_test: int = 500

    # Evaluation and output
    policy: str = DEFAULT_POLICY
    output_dir: Optional[str] = None

    @field_validator("branch_widths", "loss_widths")
    @classmethod
    def _check_widths(cls, value):
        if value is None:
            return value
        bad = [w for w in value if w not in CANONICAL_WIDTHS]
        if bad:
            raise ValueError(f"bin widths {bad} are not among {list(CANONICAL_WIDTHS)}")
        return sorted(set(value))

    @field_validator("backbone")
    @classmethod
    def _check_backbone(cls, value):
        if value not in BACKBONES:
            raise ValueError(f"unknown backbone {value!r}; choose from {sorted(BACKBONES)}")
        return value

    @field_validator("optimizer")
    @classmethod
    def _check_optimizer(cls, value):
        if value not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {value!r}; choose from {list(OPTIMIZERS)}")
        return value

    @field_validator("policy")
    @classmethod
    def _check_policy(cls, value):
        if value not in POLICIES:
            raise ValueError(f"unknown policy {value!r}; choose from {list(POLICIES)}")
        return value

    @field_validator("input_size")
    @classmethod
    def _check_input_size(cls, value):
        if value < 32:
            raise ValueError("must be >= 32")
        return value

    @field_validator("initial_lr", "loss_lambda", "norm_std")
    @classmethod
    def _check_positive(cls, value):
        if not value > 0:
            raise ValueError("must be > 0")
        return value

    @field_validator("lr_decay_factor")
    @classmethod
    def _check_decay(cls, value):
        if not value > 1:
            raise ValueError("must be > 1")
        return value

    @field_validator("plateau_patience_epochs", "max_epochs", "batch_size")
    @classmethod
    def _check_at_least_one(cls, value):
        if value < 1:
            raise ValueError("must be >= 1")
        return value

    @field_validator("pad_pixels", "num_workers")
    @classmethod
    def _check_non_negative(cls, value):
        if value < 0:
            raise ValueError("must be >= 0")
        return value

    @field_validator("flip_probability")
    @classmethod
    def _check_probability(cls, value):
        if not 0.0 <= value <= 1.0:
            raise ValueError("must be in [0, 1]")
        return value

    @model_validator(mode="after")
    def _check_consistency(self):
        min_size = MIN_INPUT_SIZE.get(self.backbone, 32)
        if self.input_size < min_size:
            raise ValueError(f"input_size {self.input_size} is below the {min_size} px minimum of {self.backbone}")
        if self.loss_widths is not None:
            missing = sorted(set(self.loss_widths) - set(self.branch_widths))
            if missing:
                raise ValueError(f"loss_widths {missing} have no branch in branch_widths")
        if self.use_regression and not self.with_regression:
            raise ValueError("use_regression needs with_regression")
        if self.pretrained and not self.pretrained_weights:
            raise ValueError("pretrained needs pretrained_weights")
        return self

    def resolved_output_dir(self) -> Path:
        return Path(self.output_dir or settings.out)

    def model_spec(self) -> ModelSpec:
        return ModelSpec(
            backbone_id=self.backbone,
            input_size=self.input_size,
            branch_widths=tuple(self.branch_widths),
            with_regression=self.with_regression,
            pretrained=self.pretrained,
            pretrained_weights=self.pretrained_weights,
        )

    def loss_config(self) -> LossConfig:
        widths = self.branch_widths if self.loss_widths is None else self.loss_widths
        regression = self.with_regression if self.use_regression is None else self.use_regression
        return LossConfig(tuple(widths), regression, self.loss_lambda)

    def train_config(self, loss_config: Optional[LossConfig] = None) -> TrainConfig:
        return TrainConfig(
            initial_lr=self.initial_lr,
            plateau_patience_epochs=self.plateau_patience_epochs,
            lr_decay_factor=self.lr_decay_factor,
            max_epochs=self.max_epochs,
            batch_size=self.batch_size,
            seed=self.seed,
            loss_config=loss_config or self.loss_config(),
            optimizer_id=self.optimizer,
            weight_decay=self.weight_decay,
            momentum=self.momentum,
            early_stop_patience=self.early_stop_patience,
            num_workers=self.num_workers,
            progress=self.progress,
        )

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(self.pad_pixels, self.flip_probability, self.augment)


def _format_errors(error: ValidationError) -> List[str]:
    messages = []
    for item in error.errors():
        key = ".".join(str(part) for part in item["loc"]) or "config"
        messages.append(f"{key}: {item['msg']}")
    return messages


def parse_overrides(pairs: Sequence[str]) -> Dict[str, Any]:
    """
    Parse ``key=value`` flags; values are read as YAML scalars or lists.

    Args:
        pairs: Strings such as ``max_epochs=2`` or ``branch_widths=[1,5]``

    Returns:
        Mapping of overrides
    """
    overrides: Dict[str, Any] = {}
    problems = []
    for pair in pairs:
        key, sep, raw = pair.partition("=")
        if not sep or not key.strip():
            problems.append(f"override {pair!r} is not key=value")
            continue
        overrides[key.strip()] = yaml.safe_load(raw) if raw.strip() else None
    if problems:
        raise ConfigError(problems)
    return overrides


def load_run_config(
    path: Optional[Union[str, Path]] = None, overrides: Optional[Dict[str, Any]] = None
) -> RunConfig:
    """
    Load a run config with precedence override > file > default.

    Args:
        path: YAML or JSON file holding a flat mapping
        overrides: Values taking precedence over the file

    Returns:
        Validated RunConfig

    Raises:
        ConfigError: listing every problem found
    """
    data: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError([f"config file not found: {path}"])
        text = path.read_text(encoding="utf-8")
        try:
            loaded = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
        except (json.JSONDecodeError, yaml.YAMLError) as e:
            raise ConfigError([f"cannot parse {path}: {e}"]) from e
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError([f"{path} must hold a flat key-value mapping"])
        nested = [k for k, v in loaded.items() if isinstance(v, dict)]
        if nested:
            raise ConfigError([f"{k}: nested sections are not allowed" for k in nested])
        data.update(loaded)
    data.update(overrides or {})
    try:
        return RunConfig(**data)
    except ValidationError as e:
        raise ConfigError(_format_errors(e)) from e
