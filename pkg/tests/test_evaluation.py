"""Tests for MAE, model evaluation and the ablation runner."""
import numpy as np
import pandas as pd
import pytest
import torch
from torch import nn

from src.exceptions import EvaluationError, ModelError
from src.evaluation.ablation import (
    DEFAULT_LADDER,
    AblationRow,
    ablation_frame,
    cell_policy,
    fill_improvements,
    format_ablation_table,
    percent,
    run_ablation,
    write_ablation_csv,
)
from src.evaluation.metrics import evaluate, mae
from src.losses.multi_loss import REGRESSION, LossConfig
from src.models.age_granularity_net import AgeGranularityNet, ModelSpec
from src.training.trainer import TrainConfig


class ConstantNet(AgeGranularityNet):
    """Predicts the same regression value and uniform class scores for every input."""

    def __init__(self, value, spec=ModelSpec(input_size=32)):
        super().__init__(spec, nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Flatten()), 3)
        self.value = value

    def forward(self, images):
        self.check_input(images)
        batch = images.shape[0]
        outputs = {key: torch.zeros(batch, head.out_features) for key, head in self.heads.items()}
        if self.regression is not None:
            outputs[REGRESSION] = torch.full((batch,), self.value)
        return outputs


def rows_with(maes):
    return [AblationRow(combo, value) for combo, value in zip(DEFAULT_LADDER, maes)]


class TestMAE:
    def test_value(self):
        assert mae([1.0, 2.0, 3.0], [2.0, 2.0, 5.0]) == 1.0

    def test_empty(self):
        with pytest.raises(EvaluationError):
            mae([], [])

    def test_length_mismatch(self):
        with pytest.raises(EvaluationError):
            mae([1.0], [1.0, 2.0])


class TestEvaluate:
    def test_constant_regression(self, small_splits):
        report = evaluate(ConstantNet(50.5), small_splits.test, "regression")
        assert report.mae == mae(np.full(8, 50.5), small_splits.test.ages)
        assert report.sample_count == 8

    def test_uniform_expected_value_is_midpoint(self, small_splits):
        report = evaluate(ConstantNet(0.0), small_splits.test, "expected_value")
        assert report.mae == pytest.approx(mae(np.full(8, 50.5), small_splits.test.ages))

    def test_per_branch(self, small_splits):
        report = evaluate(ConstantNet(50.5), small_splits.test, "regression", per_branch=True, batch_size=3)
        assert set(report.per_branch_mae) == {"w1", "w5", "w10", "w20", REGRESSION}
        assert report.per_branch_mae[REGRESSION] == report.mae

    def test_missing_branch_names_sample(self, small_splits):
        model = ConstantNet(1.0, ModelSpec(input_size=32, branch_widths=(5,)))
        with pytest.raises(ModelError, match="sample 0"):
            evaluate(model, small_splits.test, "expected_value")

    def test_report_csv(self, small_splits, tmp_path):
        report = evaluate(ConstantNet(50.5), small_splits.test, "regression", per_branch=True)
        report.write_csv(tmp_path / "eval.csv")
        frame = pd.read_csv(tmp_path / "eval.csv")
        assert frame.loc[0, "mae"] == pytest.approx(report.mae)
        assert "mae_w20" in frame.columns


class TestImprovements:
    def test_baseline_and_step_gains(self):
        rows = fill_improvements(rows_with([10.0, 8.0, 9.0, 7.5, 7.0]))
        assert rows[0].improvement is None and rows[0].relative_improvement is None
        assert [r.improvement for r in rows[1:]] == [2.0, 1.0, 2.5, 3.0]
        assert [r.relative_improvement for r in rows[1:]] == pytest.approx([0.2, 0.1, 0.25, 0.3])
        assert [r.step_improvement for r in rows[1:]] == [2.0, -1.0, 1.5, 0.5]
        assert [r.best for r in rows] == [False, False, False, False, True]

    def test_failed_rows_are_skipped(self):
        rows = fill_improvements(rows_with([10.0, None, 8.0]))
        assert rows[1].improvement is None
        assert rows[2].improvement == 2.0
        assert rows[2].step_improvement == 2.0

    def test_identical_rows_have_zero_improvement(self):
        rows = fill_improvements(rows_with([6.25, 6.25]))
        assert rows[1].improvement == 0.0 and rows[1].relative_improvement == 0.0

    @pytest.mark.parametrize("value,expected", [(0.125, 13), (-0.125, -13), (0.2, 20), (0.004, 0), (0.489, 49)])
    def test_percent(self, value, expected):
        assert percent(value) == expected


class TestCellPolicy:
    def test_default_policy_kept_when_width_one_trained(self):
        assert cell_policy(LossConfig((1, 5), False)) == "expected_value"

    def test_falls_back_to_regression(self):
        assert cell_policy(LossConfig((5,), True)) == "regression"

    def test_regression_policy_without_regression(self):
        assert cell_policy(LossConfig((1,), False), "regression") == "expected_value"


class TestReport:
    def test_table_columns_and_marks(self):
        rows = fill_improvements(rows_with([7.35, 5.1, 4.9, 4.2, 3.74]))
        for row in rows:
            row.backbone = "desk"
        table = format_ablation_table(rows)
        lines = table.splitlines()
        header = [cell.strip() for cell in lines[0].split("|")]
        assert header == [
            "Model", "100-classes", "20-classes", "10-classes", "5-classes", "mse", "MAE", "improvement", "relative"
        ]
        baseline = [cell.strip() for cell in lines[2].split("|")]
        assert baseline[0] == "desk" and baseline[1] == "x" and baseline[6] == "7.35"
        assert len(baseline) == 7 or baseline[7:] == ["", ""]
        last = [cell.strip() for cell in lines[-1].split("|")]
        assert last[6] == "3.74*" and last[7] == "3.61" and last[8] == "49%"
        assert last[5] == "x"

    def test_table_is_stable(self):
        rows = fill_improvements(rows_with([7.35, 3.74]))
        assert format_ablation_table(rows) == format_ablation_table(rows)

    def test_failed_row_in_table(self):
        rows = fill_improvements(rows_with([7.0, None]))
        assert "failed" in format_ablation_table(rows)

    def test_frame_and_csv(self, tmp_path):
        rows = fill_improvements(rows_with([7.0, 6.0]))
        frame = ablation_frame(rows)
        assert list(frame["combination"]) == ["100", "100+20"]
        assert list(frame["20-classes"]) == [0, 1]
        path = write_ablation_csv(rows, tmp_path / "out" / "ablation.csv")
        assert pd.read_csv(path)["improvement"].iloc[1] == 1.0


class TestRunAblation:
    @pytest.fixture
    def config(self):
        return TrainConfig(max_epochs=1, batch_size=8, seed=0)

    def test_rows_and_cell_artifacts(self, small_spec, small_splits, config, tmp_path):
        ladder = [LossConfig((1,), False), LossConfig((1, 5), False)]
        rows = run_ablation(config, ladder, small_splits, model_spec=small_spec, output_dir=tmp_path)
        assert [r.loss_combination for r in rows] == ladder
        assert all(not r.failed and np.isfinite(r.mae) for r in rows)
        assert rows[1].improvement == rows[0].mae - rows[1].mae
        assert (tmp_path / "cells" / "00_100" / "history.csv").exists()
        assert (tmp_path / "cells" / "01_100+20" / "history.csv").exists()

    def test_identical_combinations_match(self, small_spec, small_splits, config):
        ladder = [LossConfig((1,), False)] * 2
        rows = run_ablation(config, ladder, small_splits, model_spec=small_spec)
        assert rows[0].mae == rows[1].mae
        assert rows[1].improvement == 0.0

    def test_empty_ladder(self, small_splits, config):
        with pytest.raises(EvaluationError):
            run_ablation(config, [], small_splits)

    def test_failing_cell_is_reported(self, small_splits, config):
        spec = ModelSpec(input_size=32, pretrained=True, pretrained_weights="/nonexistent/weights.pt")
        rows = run_ablation(config, [LossConfig((1,), False)], small_splits, model_spec=spec)
        assert rows[0].failed and "ModelError" in rows[0].error
