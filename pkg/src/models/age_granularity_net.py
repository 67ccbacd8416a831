"""Shared backbone with one head per granularity plus a regression node."""
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
from torch import nn

from src.exceptions import ModelError, ShapeError
from src.labels.granularity import CANONICAL_WIDTHS, make_spec, representatives
from src.losses.multi_loss import REGRESSION, BranchOutputs, branch_key, softmax
from src.models.backbones import BACKBONES, MIN_INPUT_SIZE, build_backbone

logger = logging.getLogger(__name__)

POLICIES = ("expected_value", "argmax_representative", "regression", "fused")
DEFAULT_POLICY = "expected_value"

__all__ = [
    "BranchOutputs",
    "ModelSpec",
    "AgeGranularityNet",
    "build_model",
    "forward",
    "predict_age",
    "POLICIES",
    "DEFAULT_POLICY",
]


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of an age-granularity network."""

    backbone_id: str = "desk"
    input_size: int = 224
    branch_widths: Tuple[int, ...] = CANONICAL_WIDTHS
    with_regression: bool = True
    pretrained: bool = False
    pretrained_weights: Optional[str] = None

    def __post_init__(self):
        widths = tuple(sorted(set(int(w) for w in self.branch_widths)))
        object.__setattr__(self, "branch_widths", widths)

    def validate(self) -> None:
        """Raise ModelError when the spec cannot be built."""
        if self.backbone_id not in BACKBONES:
            raise ModelError(
                f"Unknown backbone {self.backbone_id!r}; registered: {sorted(BACKBONES)}"
            )
        min_size = MIN_INPUT_SIZE[self.backbone_id]
        if self.input_size < min_size:
            raise ModelError(
                f"input_size must be >= {min_size} for {self.backbone_id}, got {self.input_size}"
            )
        bad = [w for w in self.branch_widths if w not in CANONICAL_WIDTHS]
        if bad:
            raise ModelError(f"branch widths {bad} not in {CANONICAL_WIDTHS}")
        if not self.branch_widths and not self.with_regression:
            raise ModelError("model needs at least one branch")
        if self.pretrained and not self.pretrained_weights:
            raise ModelError("pretrained backbone requested but no weight file given")

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["branch_widths"] = list(self.branch_widths)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "ModelSpec":
        data = dict(data)
        data["branch_widths"] = tuple(data.get("branch_widths", CANONICAL_WIDTHS))
        return cls(**data)


class AgeGranularityNet(nn.Module):
    """Backbone features feed one dense head per branch."""

    def __init__(self, spec: ModelSpec, backbone: nn.Module, feature_dim: int):
        super().__init__()
        self.spec = spec
        self.backbone = backbone
        self.heads = nn.ModuleDict(
            {branch_key(w): nn.Linear(feature_dim, make_spec(w).num_classes) for w in spec.branch_widths}
        )
        # linear activation: the regression output is unbounded
        self.regression = nn.Linear(feature_dim, 1) if spec.with_regression else None

    @property
    def branches(self) -> List[str]:
        names = list(self.heads.keys())
        if self.regression is not None:
            names.append(REGRESSION)
        return names

    def check_input(self, images: torch.Tensor) -> None:
        size = self.spec.input_size
        expected = (images.shape[0] if images.dim() == 4 else -1, 3, size, size)
        if images.dim() != 4 or tuple(images.shape[1:]) != expected[1:]:
            raise ShapeError(expected, tuple(images.shape))

    def forward(self, images: torch.Tensor) -> Dict[str, torch.Tensor]:
        self.check_input(images)
        features = self.backbone(images)
        outputs = {key: head(features) for key, head in self.heads.items()}
        if self.regression is not None:
            outputs[REGRESSION] = self.regression(features).squeeze(1)
        return outputs


def build_model(spec: ModelSpec, seed: int) -> AgeGranularityNet:
    """
    Build a model with seeded initialization.

    Args:
        spec: Architecture spec
        seed: Seed for every randomly initialized parameter

    Returns:
        AgeGranularityNet with one head per branch
    """
    spec.validate()
    weights = spec.pretrained_weights if spec.pretrained else None
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        backbone, feature_dim = build_backbone(spec.backbone_id, weights)
        model = AgeGranularityNet(spec, backbone, feature_dim)
    logger.debug("Built %s with branches %s", spec.backbone_id, model.branches)
    return model


def split_outputs(raw: Dict[str, torch.Tensor]) -> List[BranchOutputs]:
    """Turn batched raw outputs into one BranchOutputs per sample."""
    arrays = {key: value.detach().cpu().double().numpy() for key, value in raw.items()}
    if not arrays:
        return []
    batch = next(iter(arrays.values())).shape[0]
    result = []
    for i in range(batch):
        logits = {int(key[1:]): arrays[key][i] for key in arrays if key != REGRESSION}
        regression = float(arrays[REGRESSION][i]) if REGRESSION in arrays else None
        result.append(BranchOutputs(logits, regression))
    return result


def forward(model: AgeGranularityNet, images: torch.Tensor) -> List[BranchOutputs]:
    """
    Inference forward pass.

    Args:
        model: Built model
        images: Normalized batch (B, 3, S, S)

    Returns:
        One BranchOutputs per sample; empty list for an empty batch
    """
    model.check_input(images)
    if images.shape[0] == 0:
        return []
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            raw = model(images)
    finally:
        model.train(was_training)
    return split_outputs(raw)


def _branch_logits(outputs: BranchOutputs, width: int) -> np.ndarray:
    if width not in outputs.class_logits:
        raise ModelError(f"missing branch {width} required by the inference policy")
    return np.asarray(outputs.class_logits[width], dtype=np.float64)


def predict_age(outputs: BranchOutputs, policy: str = DEFAULT_POLICY, width: int = 1) -> float:
    """
    Decode branch outputs into an age in years.

    Args:
        outputs: Outputs for one sample
        policy: One of ``POLICIES``
        width: Classification branch decoded by the class-based policies

    Returns:
        Predicted age
    """
    if policy == "regression":
        if outputs.regression_output is None:
            raise ModelError(f"missing branch {REGRESSION} required by the inference policy")
        return float(outputs.regression_output)
    if policy == "expected_value":
        logits = _branch_logits(outputs, width)
        spec = make_spec(width)
        value = float(np.dot(softmax(logits), representatives(spec)))
        return min(max(value, float(spec.age_min)), float(spec.age_max))
    if policy == "argmax_representative":
        logits = _branch_logits(outputs, width)
        return float(representatives(make_spec(width))[int(np.argmax(logits))])
    if policy == "fused":
        estimates = [predict_age(outputs, "expected_value", w) for w in sorted(outputs.class_logits)]
        if outputs.regression_output is not None:
            estimates.append(float(outputs.regression_output))
        if not estimates:
            raise ModelError("fused policy needs at least one branch")
        return float(np.mean(estimates))
    raise ModelError(f"Unknown policy {policy!r}; choose from {POLICIES}")
