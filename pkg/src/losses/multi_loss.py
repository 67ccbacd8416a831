"""Cross-entropy and MSE terms, their gradients, and the weighted aggregate loss.

The numpy functions are the per-sample reference used for verification; the
``MultiGranularityLoss`` module is the batched torch objective used in training.
Both reduce to the same value on a batch of one.
"""
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from src.exceptions import LossInputError
from src.labels.granularity import (
    CANONICAL_WIDTHS,
    AgeLike,
    AgeLabel,
    canonical_specs,
    make_spec,
    quantize,
    quantize_array,
)

REGRESSION = "regression"
BranchId = Union[int, str]


@dataclass(frozen=True)
class LossConfig:
    """Which loss terms are active and how the regression term is weighted."""

    active_granularities: Tuple[int, ...] = CANONICAL_WIDTHS
    use_regression: bool = True
    lam: float = 1.0

    def __post_init__(self):
        widths = tuple(sorted(set(int(w) for w in self.active_granularities)))
        for width in widths:
            if width not in CANONICAL_WIDTHS:
                raise LossInputError(f"granularity {width} is not one of {CANONICAL_WIDTHS}")
        if not widths and not self.use_regression:
            raise LossInputError("at least one loss term must be active")
        if not (self.lam > 0 and math.isfinite(self.lam)):
            raise LossInputError(f"lambda must be a positive real, got {self.lam}")
        object.__setattr__(self, "active_granularities", widths)

    @property
    def num_terms(self) -> int:
        return len(self.active_granularities) + int(self.use_regression)

    @property
    def name(self) -> str:
        """Compact label such as ``100+20+mse``."""
        specs = canonical_specs()
        parts = [str(specs[w].num_classes) for w in self.active_granularities]
        if self.use_regression:
            parts.append("mse")
        return "+".join(parts)

    @classmethod
    def parse(cls, text: str, lam: float = 1.0) -> "LossConfig":
        """
        Parse a ladder token such as ``100+20`` or ``100+20+10+5+mse``.

        Class counts (100/20/10/5) are used, matching report columns.
        """
        by_classes = {spec.num_classes: width for width, spec in canonical_specs().items()}
        widths: List[int] = []
        use_regression = False
        for token in filter(None, (t.strip().lower() for t in text.split("+"))):
            if token == "mse":
                use_regression = True
                continue
            try:
                count = int(token)
            except ValueError:
                raise LossInputError(f"unknown loss term {token!r} in {text!r}") from None
            if count not in by_classes:
                raise LossInputError(f"no branch with {count} classes in {text!r}")
            widths.append(by_classes[count])
        return cls(tuple(widths), use_regression, lam)


@dataclass
class BranchOutputs:
    """Per-branch logits plus the regression output for a single input."""

    class_logits: Dict[int, np.ndarray] = field(default_factory=dict)
    regression_output: Optional[float] = None


@dataclass
class LossBreakdown:
    """Per-branch loss values and their aggregate."""

    per_branch: Dict[BranchId, float]
    aggregate: float


def _check_logits(logits, branch: Optional[str] = None) -> np.ndarray:
    values = np.asarray(logits, dtype=np.float64)
    if values.ndim != 1 or values.size == 0:
        raise LossInputError(f"logits must be a non-empty vector, got shape {values.shape}", branch)
    if not np.all(np.isfinite(values)):
        raise LossInputError("logits must be finite", branch)
    return values


def log_softmax(logits) -> np.ndarray:
    """Max-shifted log-softmax of a vector."""
    values = np.asarray(logits, dtype=np.float64)
    shifted = values - values.max()
    return shifted - np.log(np.exp(shifted).sum())


def softmax(logits) -> np.ndarray:
    """Max-shifted softmax of a vector."""
    values = np.asarray(logits, dtype=np.float64)
    exp = np.exp(values - values.max())
    return exp / exp.sum()


def cross_entropy(logits, target_index: int) -> float:
    """
    Negative log-probability of the target class.

    Args:
        logits: Real vector of length K
        target_index: Class index in [0, K)

    Returns:
        Non-negative loss
    """
    values = _check_logits(logits)
    if not 0 <= int(target_index) < values.size:
        raise LossInputError(f"target {target_index} out of range for {values.size} classes")
    # -log p can round to a tiny negative number when p == 1
    return max(0.0, float(-log_softmax(values)[int(target_index)]))


def mse(prediction: Union[float, Sequence[float]], target: Union[float, Sequence[float]]) -> float:
    """
    Squared error, or its mean over a batch when sequences are given.

    Args:
        prediction: Predicted age(s)
        target: Ground-truth age(s)

    Returns:
        Squared error (scalar) or mean squared error (batch)
    """
    pred = np.asarray(prediction, dtype=np.float64)
    true = np.asarray(target, dtype=np.float64)
    if pred.shape != true.shape:
        raise LossInputError(f"prediction shape {pred.shape} != target shape {true.shape}")
    if pred.size == 0:
        raise LossInputError("mse of an empty batch is undefined")
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(true))):
        raise LossInputError("mse inputs must be finite")
    return float(np.mean((pred - true) ** 2))


def _age_value(age: AgeLike) -> float:
    value = float(age.apparent_age if isinstance(age, AgeLabel) else age)
    if not math.isfinite(value):
        raise LossInputError(f"age must be finite, got {value}")
    return value


def _required_inputs(outputs: BranchOutputs, config: LossConfig):
    for width in config.active_granularities:
        if width not in outputs.class_logits:
            raise LossInputError(f"missing output for branch {width}", str(width))
        expected = make_spec(width).num_classes
        logits = _check_logits(outputs.class_logits[width], str(width))
        if logits.size != expected:
            raise LossInputError(
                f"branch {width} has {logits.size} logits, expected {expected}", str(width)
            )
    if config.use_regression:
        if outputs.regression_output is None:
            raise LossInputError("missing output for branch regression", REGRESSION)
        if not math.isfinite(float(outputs.regression_output)):
            raise LossInputError("regression output must be finite", REGRESSION)


def aggregate_loss(outputs: BranchOutputs, age: AgeLike, config: LossConfig) -> LossBreakdown:
    """
    Masked, lambda-weighted sum of the active loss terms for one sample.

    Args:
        outputs: Branch outputs for the sample
        age: Ground-truth apparent age
        config: Active terms and regression weight

    Returns:
        LossBreakdown with one entry per active branch
    """
    _required_inputs(outputs, config)
    target_age = _age_value(age)
    specs = canonical_specs()
    per_branch: Dict[BranchId, float] = {}
    total = 0.0
    for width in config.active_granularities:
        term = cross_entropy(outputs.class_logits[width], quantize(target_age, specs[width]))
        per_branch[width] = term
        total += term
    if config.use_regression:
        term = mse(float(outputs.regression_output), target_age)
        per_branch[REGRESSION] = term
        total += config.lam * term
    return LossBreakdown(per_branch, total)


def loss_gradients(outputs: BranchOutputs, age: AgeLike, config: LossConfig) -> BranchOutputs:
    """
    Closed-form gradient of ``aggregate_loss`` with respect to every output.

    Args:
        outputs: Branch outputs for the sample
        age: Ground-truth apparent age
        config: Active terms and regression weight

    Returns:
        BranchOutputs holding gradients; inactive branches get zeros
    """
    _required_inputs(outputs, config)
    target_age = _age_value(age)
    specs = canonical_specs()
    grads: Dict[int, np.ndarray] = {}
    for width, logits in outputs.class_logits.items():
        values = np.asarray(logits, dtype=np.float64)
        if width in config.active_granularities:
            grad = softmax(values)
            grad[quantize(target_age, specs[width])] -= 1.0
        else:
            grad = np.zeros_like(values)
        grads[width] = grad
    regression_grad = None
    if outputs.regression_output is not None:
        regression_grad = 0.0
        if config.use_regression:
            regression_grad = config.lam * 2.0 * (float(outputs.regression_output) - target_age)
    return BranchOutputs(grads, regression_grad)


def branch_key(width: int) -> str:
    """Key of a classification branch in module dicts and history columns."""
    return f"w{width}"


class MultiGranularityLoss(nn.Module):
    """Batched aggregate objective over raw model outputs.

    Each term is reduced by the mean over the batch before the terms are summed.
    """

    def __init__(self, config: LossConfig):
        super().__init__()
        self.config = config
        self.specs = {w: make_spec(w) for w in config.active_granularities}

    def targets(self, ages: torch.Tensor) -> Dict[int, torch.Tensor]:
        """Class targets per active granularity for a batch of ages."""
        ages_np = ages.detach().cpu().numpy()
        return {
            width: torch.as_tensor(quantize_array(ages_np, spec), device=ages.device)
            for width, spec in self.specs.items()
        }

    def forward(
        self, outputs: Mapping[str, torch.Tensor], ages: torch.Tensor
    ) -> Tuple[torch.Tensor, Dict[BranchId, torch.Tensor]]:
        """
        Compute the aggregate loss for a batch.

        Args:
            outputs: Raw model outputs keyed by ``w<width>`` and ``regression``
            ages: Ground-truth ages, shape (B,)

        Returns:
            Tuple of (aggregate scalar tensor, per-branch scalar tensors)
        """
        per_branch: Dict[BranchId, torch.Tensor] = {}
        total = ages.new_zeros((), dtype=torch.float64)
        for width, target in self.targets(ages).items():
            key = branch_key(width)
            if key not in outputs:
                raise LossInputError(f"missing output for branch {width}", str(width))
            term = F.cross_entropy(outputs[key].double(), target, reduction="mean")
            per_branch[width] = term
            total = total + term
        if self.config.use_regression:
            if REGRESSION not in outputs:
                raise LossInputError("missing output for branch regression", REGRESSION)
            term = F.mse_loss(outputs[REGRESSION].double(), ages.double(), reduction="mean")
            per_branch[REGRESSION] = term
            total = total + self.config.lam * term
        return total, per_branch
