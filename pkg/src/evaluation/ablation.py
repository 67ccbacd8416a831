"""Loss-combination ablation: one independent training run per combination."""
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import pandas as pd

from src.data.dataset import DatasetSplits
from src.evaluation.metrics import evaluate
from src.exceptions import EvaluationError
from src.labels.granularity import CANONICAL_WIDTHS, canonical_specs
from src.losses.multi_loss import LossConfig, branch_key
from src.models.age_granularity_net import DEFAULT_POLICY, ModelSpec, build_model
from src.training.trainer import TrainConfig, train

logger = logging.getLogger(__name__)

# Default ladder: 100, +20, +10, +5, +mse
DEFAULT_LADDER: Tuple[LossConfig, ...] = (
    LossConfig((1,), False),
    LossConfig((1, 5), False),
    LossConfig((1, 5, 10), False),
    LossConfig((1, 5, 10, 20), False),
    LossConfig((1, 5, 10, 20), True),
)


@dataclass
class AblationRow:
    """One row of the ablation report."""

    loss_combination: LossConfig
    mae: Optional[float]
    improvement: Optional[float] = None
    relative_improvement: Optional[float] = None
    step_improvement: Optional[float] = None
    step_relative_improvement: Optional[float] = None
    policy: str = DEFAULT_POLICY
    backbone: str = ""
    best: bool = False
    error: str = ""

    @property
    def failed(self) -> bool:
        return self.mae is None


def cell_policy(combination: LossConfig, policy: str = DEFAULT_POLICY) -> str:
    """
    Inference policy for a cell.

    The default policy decodes the width-1 branch; a cell that did not train
    that branch falls back to regression, then to ``expected_value`` (which the
    caller must pair with the cell's finest width).
    """
    needs_width_1 = policy in ("expected_value", "argmax_representative")
    if needs_width_1 and 1 not in combination.active_granularities:
        return "regression" if combination.use_regression else policy
    if policy == "regression" and not combination.use_regression:
        return "expected_value"
    return policy


def _run_cell(
    index: int,
    combination: LossConfig,
    base_config: TrainConfig,
    model_spec: ModelSpec,
    splits: DatasetSplits,
    output_dir: Optional[str],
    policy: str,
) -> Tuple[Optional[float], str, str]:
    used = cell_policy(combination, policy)
    try:
        config = replace(base_config, loss_config=combination)
        model = build_model(model_spec, config.seed)
        cell_dir = None
        if output_dir is not None:
            cell_dir = Path(output_dir) / "cells" / f"{index:02d}_{combination.name}"
        model, _ = train(model, splits.train, splits.val, config, output_dir=cell_dir)
        if used == "expected_value" and 1 not in combination.active_granularities:
            report = _evaluate_width(model, splits, combination.active_granularities[0])
        else:
            report = evaluate(model, splits.eval_split, used)
        return report.mae, used, ""
    except Exception as e:
        logger.warning("Ablation cell %d (%s) failed: %s", index, combination.name, e)
        return None, used, f"{type(e).__name__}: {e}"


def _evaluate_width(model, splits: DatasetSplits, width: int):
    report = evaluate(model, splits.eval_split, "expected_value", per_branch=True)
    report.mae = report.per_branch_mae[branch_key(width)]
    return report


def fill_improvements(rows: List[AblationRow]) -> List[AblationRow]:
    """Baseline-relative and previous-row-relative gains; flags the lowest MAE."""
    if not rows:
        return rows
    baseline = rows[0].mae
    previous = baseline
    for i, row in enumerate(rows):
        if row.failed:
            continue
        if i > 0 and baseline is not None:
            row.improvement = baseline - row.mae
            row.relative_improvement = row.improvement / baseline if baseline else None
        if i > 0 and previous is not None:
            row.step_improvement = previous - row.mae
            row.step_relative_improvement = row.step_improvement / previous if previous else None
        previous = row.mae
    finished = [row for row in rows if not row.failed]
    if finished:
        min(finished, key=lambda r: r.mae).best = True
    return rows


def run_ablation(
    base_config: TrainConfig,
    combinations: Sequence[LossConfig],
    splits: DatasetSplits,
    model_spec: Optional[ModelSpec] = None,
    output_dir: Optional[Union[str, Path]] = None,
    parallel: int = 1,
    policy: str = DEFAULT_POLICY,
) -> List[AblationRow]:
    """
    Train and evaluate one model per loss combination.

    Every cell builds the full model from ``base_config.seed`` so all cells share
    the same initialization; the combination only masks loss terms.

    Args:
        base_config: Training config shared by all cells
        combinations: Loss combinations, baseline first
        splits: Train/val/test datasets
        model_spec: Architecture; defaults to the desk backbone with all branches
        output_dir: Receives per-cell checkpoints and training curves
        parallel: Number of cells trained concurrently
        policy: Default inference policy

    Returns:
        Rows in input order
    """
    if not combinations:
        raise EvaluationError("ablation needs at least one loss combination")
    if combinations[0].active_granularities != (1,) or combinations[0].use_regression:
        logger.warning("First combination %s is not the width-1 baseline", combinations[0].name)
    spec = model_spec or ModelSpec(backbone_id="desk")
    spec = replace(spec, branch_widths=CANONICAL_WIDTHS, with_regression=True)
    out = str(output_dir) if output_dir is not None else None

    jobs = [(i, c, base_config, spec, splits, out, policy) for i, c in enumerate(combinations)]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            results = list(pool.map(_run_cell, *zip(*jobs)))
    else:
        results = [_run_cell(*job) for job in jobs]

    rows = [
        AblationRow(combination, mae, policy=used, backbone=spec.backbone_id, error=error)
        for combination, (mae, used, error) in zip(combinations, results)
    ]
    return fill_improvements(rows)


def percent(value: float) -> int:
    """Nearest integer percent, halves rounded away from zero."""
    scaled = abs(value) * 100.0
    return int(math.copysign(math.floor(scaled + 0.5), value))


def ablation_frame(rows: Sequence[AblationRow]) -> pd.DataFrame:
    """Machine-readable report, full precision."""
    specs = canonical_specs()
    records = []
    for i, row in enumerate(rows):
        combo = row.loss_combination
        record = {"backbone": row.backbone, "row": i, "combination": combo.name}
        for width in CANONICAL_WIDTHS:
            record[specs[width].label] = int(width in combo.active_granularities)
        record["mse"] = int(combo.use_regression)
        record["lambda"] = combo.lam
        record["mae"] = row.mae
        record["improvement"] = row.improvement
        record["relative_improvement"] = row.relative_improvement
        record["step_improvement"] = row.step_improvement
        record["step_relative_improvement"] = row.step_relative_improvement
        record["policy"] = row.policy
        record["best"] = int(row.best)
        record["status"] = "failed" if row.failed else "ok"
        record["error"] = row.error
        records.append(record)
    return pd.DataFrame(records)


def write_ablation_csv(rows: Sequence[AblationRow], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ablation_frame(rows).to_csv(path, index=False, lineterminator="\n")
    return path


def format_ablation_table(rows: Sequence[AblationRow]) -> str:
    """
    Aligned text table: branch marks, MAE, improvement and relative columns.

    The lowest MAE is marked with ``*``; baseline improvement cells are blank.
    """
    specs = canonical_specs()
    header = ["Model"] + [specs[w].label for w in CANONICAL_WIDTHS] + ["mse", "MAE", "improvement", "relative"]
    body = []
    last_backbone = None
    for row in rows:
        combo = row.loss_combination
        cells = [row.backbone if row.backbone != last_backbone else ""]
        last_backbone = row.backbone
        cells += ["x" if w in combo.active_granularities else "" for w in CANONICAL_WIDTHS]
        cells.append("x" if combo.use_regression else "")
        if row.failed:
            cells += ["failed", "", ""]
        else:
            cells.append(f"{row.mae:.2f}" + ("*" if row.best else ""))
            cells.append("" if row.improvement is None else f"{row.improvement:.2f}")
            cells.append("" if row.relative_improvement is None else f"{percent(row.relative_improvement)}%")
        body.append(cells)
    widths = [max(len(r[c]) for r in [header] + body) for c in range(len(header))]
    lines = [" | ".join(cell.ljust(w) for cell, w in zip(line, widths)).rstrip() for line in [header] + body]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
