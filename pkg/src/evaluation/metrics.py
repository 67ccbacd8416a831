"""Mean absolute error and model evaluation."""
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from torch.utils.data import DataLoader

from src.data.dataset import AgeDataset
from src.exceptions import EvaluationError, ModelError
from src.losses.multi_loss import REGRESSION, branch_key
from src.models.age_granularity_net import DEFAULT_POLICY, AgeGranularityNet, forward, predict_age


@dataclass
class EvalReport:
    """MAE of one model on one dataset under one inference policy."""

    mae: float
    sample_count: int
    policy: str
    per_branch_mae: Optional[Dict[str, float]] = None

    def to_frame(self) -> pd.DataFrame:
        row = {"policy": self.policy, "sample_count": self.sample_count, "mae": self.mae}
        for branch, value in (self.per_branch_mae or {}).items():
            row[f"mae_{branch}"] = value
        return pd.DataFrame([row])

    def write_csv(self, path: Union[str, Path]) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, lineterminator="\n")


def mae(predictions: Sequence[float], targets: Sequence[float]) -> float:
    """
    Mean absolute error.

    Args:
        predictions: Predicted ages
        targets: Ground-truth ages, same length

    Returns:
        (1/K) * sum |pred_k - target_k|
    """
    pred = np.asarray(predictions, dtype=np.float64).ravel()
    true = np.asarray(targets, dtype=np.float64).ravel()
    if pred.size != true.size:
        raise EvaluationError(f"{pred.size} predictions but {true.size} targets")
    if pred.size == 0:
        raise EvaluationError("mae of an empty set is undefined")
    # fsum keeps the result within an ulp of the exact mean
    return math.fsum(np.abs(pred - true)) / pred.size


def evaluate(
    model: AgeGranularityNet,
    dataset: AgeDataset,
    policy: str = DEFAULT_POLICY,
    per_branch: bool = False,
    batch_size: int = 64,
) -> EvalReport:
    """
    Predict every sample (augmentation off) and score the predictions.

    Args:
        model: Trained model
        dataset: Dataset to score
        policy: Inference policy for the headline MAE
        per_branch: Also score each built branch on its own
        batch_size: Inference batch size

    Returns:
        EvalReport
    """
    if len(dataset) == 0:
        raise EvaluationError("cannot evaluate on an empty dataset")
    predictions: List[float] = []
    targets: List[float] = []
    branch_predictions: Dict[str, List[float]] = {}
    loader = DataLoader(dataset.without_augmentation(), batch_size=batch_size, shuffle=False)
    for images, ages in loader:
        offset = len(targets)
        for i, outputs in enumerate(forward(model, images)):
            try:
                predictions.append(predict_age(outputs, policy))
            except ModelError as e:
                raise ModelError(f"sample {offset + i}: {e}") from e
            if per_branch:
                for width in sorted(outputs.class_logits):
                    branch_predictions.setdefault(branch_key(width), []).append(
                        predict_age(outputs, "expected_value", width)
                    )
                if outputs.regression_output is not None:
                    branch_predictions.setdefault(REGRESSION, []).append(float(outputs.regression_output))
        targets.extend(float(a) for a in dataset.ages[offset:offset + len(ages)])

    per_branch_mae = None
    if per_branch:
        per_branch_mae = {branch: mae(values, targets) for branch, values in branch_predictions.items()}
    return EvalReport(mae(predictions, targets), len(targets), policy, per_branch_mae)
