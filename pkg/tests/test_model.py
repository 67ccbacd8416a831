"""Tests for the multi-branch network, backbones and inference policies."""
import numpy as np
import pytest
import torch

from src.exceptions import ModelError, ShapeError
from src.losses.multi_loss import REGRESSION, BranchOutputs, LossConfig, MultiGranularityLoss
from src.models.age_granularity_net import ModelSpec, build_model, forward, predict_age
from src.models.backbones import BACKBONES, MIN_INPUT_SIZE, build_backbone


def one_hot_logits(index, size, value=100.0):
    logits = np.zeros(size)
    logits[index] = value
    return logits


class TestModelSpec:
    def test_registered_backbones(self):
        assert {"desk", "mobilenet_v1", "alexnet", "resnet50", "densenet121", "vgg16_bn"} <= set(BACKBONES)

    def test_unknown_backbone(self):
        with pytest.raises(ModelError):
            ModelSpec(backbone_id="lenet").validate()

    def test_input_too_small(self):
        with pytest.raises(ModelError):
            ModelSpec(input_size=16).validate()

    def test_alexnet_needs_larger_input(self):
        with pytest.raises(ModelError) as exc:
            ModelSpec(backbone_id="alexnet", input_size=32).validate()
        assert "alexnet" in str(exc.value)
        ModelSpec(backbone_id="alexnet", input_size=MIN_INPUT_SIZE["alexnet"]).validate()

    def test_needs_a_branch(self):
        with pytest.raises(ModelError):
            ModelSpec(branch_widths=(), with_regression=False).validate()

    def test_pretrained_file_missing(self, tmp_path):
        spec = ModelSpec(input_size=32, pretrained=True, pretrained_weights=str(tmp_path / "none.pt"))
        with pytest.raises(ModelError):
            build_model(spec, seed=0)

    def test_dict_round_trip(self):
        spec = ModelSpec(backbone_id="alexnet", branch_widths=(5, 1))
        assert ModelSpec.from_dict(spec.to_dict()) == spec


class TestBuildModel:
    def test_output_shapes(self, small_spec):
        model = build_model(small_spec, seed=0)
        raw = model(torch.zeros(2, 3, 32, 32))
        assert {k: tuple(v.shape) for k, v in raw.items()} == {
            "w1": (2, 100),
            "w5": (2, 20),
            "w10": (2, 10),
            "w20": (2, 5),
            REGRESSION: (2,),
        }

    def test_branch_subset(self):
        model = build_model(ModelSpec(input_size=32, branch_widths=(1, 20), with_regression=False), seed=0)
        assert model.branches == ["w1", "w20"]

    def test_same_seed_same_parameters(self, small_spec):
        a = build_model(small_spec, seed=7).state_dict()
        b = build_model(small_spec, seed=7).state_dict()
        assert all(torch.equal(a[k], b[k]) for k in a)

    def test_different_seed_differs(self, small_spec):
        a = build_model(small_spec, seed=1).state_dict()
        b = build_model(small_spec, seed=2).state_dict()
        assert not torch.equal(a["heads.w1.weight"], b["heads.w1.weight"])

    def test_build_leaves_global_rng_alone(self, small_spec):
        torch.manual_seed(123)
        expected = torch.rand(3)
        torch.manual_seed(123)
        build_model(small_spec, seed=0)
        assert torch.equal(torch.rand(3), expected)

    def test_pretrained_weights_loaded(self, tmp_path):
        backbone, _ = build_backbone("desk")
        path = tmp_path / "desk.pt"
        torch.save(backbone.state_dict(), path)
        spec = ModelSpec(input_size=32, pretrained=True, pretrained_weights=str(path))
        model = build_model(spec, seed=99)
        loaded = model.backbone.state_dict()
        assert all(torch.equal(loaded[k], v) for k, v in backbone.state_dict().items())

    @pytest.mark.parametrize("backbone", sorted(BACKBONES))
    def test_every_backbone_at_its_smallest_input(self, backbone):
        size = MIN_INPUT_SIZE[backbone]
        model = build_model(ModelSpec(backbone_id=backbone, input_size=size), seed=0)
        outputs = forward(model, torch.zeros(2, 3, size, size))
        assert len(outputs) == 2
        assert {w: logits.shape for w, logits in outputs[0].class_logits.items()} == {
            1: (100,),
            5: (20,),
            10: (10,),
            20: (5,),
        }
        assert np.isfinite(outputs[1].regression_output)


class TestForward:
    def test_empty_batch(self, small_spec):
        model = build_model(small_spec, seed=0)
        assert forward(model, torch.zeros(0, 3, 32, 32)) == []

    @pytest.mark.parametrize("shape", [(2, 3, 64, 64), (2, 1, 32, 32), (3, 32, 32)])
    def test_shape_mismatch(self, small_spec, shape):
        model = build_model(small_spec, seed=0)
        with pytest.raises(ShapeError):
            forward(model, torch.zeros(*shape))

    def test_restores_training_mode(self, small_spec):
        model = build_model(small_spec, seed=0)
        model.train()
        forward(model, torch.zeros(1, 3, 32, 32))
        assert model.training

    def test_batch_composition_does_not_matter(self, small_spec):
        model = build_model(small_spec, seed=0)
        images = torch.randn(4, 3, 32, 32, generator=torch.Generator().manual_seed(0))
        together = forward(model, images)
        alone = forward(model, images[2:3])[0]
        np.testing.assert_allclose(together[2].class_logits[5], alone.class_logits[5], rtol=1e-5, atol=1e-6)
        assert together[2].regression_output == pytest.approx(alone.regression_output, rel=1e-5, abs=1e-6)

    def test_masked_heads_get_no_gradient(self, small_spec):
        model = build_model(small_spec, seed=0)
        criterion = MultiGranularityLoss(LossConfig((1,), False))
        loss, _ = criterion(model(torch.randn(2, 3, 32, 32)), torch.tensor([20.0, 60.0]))
        loss.backward()
        assert model.heads["w1"].weight.grad is not None
        assert model.heads["w5"].weight.grad is None
        assert model.regression.weight.grad is None


class TestPredictAge:
    def test_expected_value_peaked(self):
        outputs = BranchOutputs({1: one_hot_logits(43, 100)}, None)
        assert predict_age(outputs, "expected_value") == pytest.approx(44.0, abs=1e-9)

    def test_expected_value_uniform_is_midpoint(self):
        outputs = BranchOutputs({1: np.zeros(100)}, None)
        assert predict_age(outputs, "expected_value") == pytest.approx(50.5)

    def test_argmax_representative(self):
        outputs = BranchOutputs({1: one_hot_logits(43, 100, 1.0), 5: one_hot_logits(8, 20, 1.0)}, None)
        assert predict_age(outputs, "argmax_representative") == 44.0
        assert predict_age(outputs, "argmax_representative", width=5) == 43.0

    def test_argmax_ignores_constant_shift(self):
        logits = np.random.default_rng(2).normal(size=100)
        shifted = BranchOutputs({1: logits + 12.5}, None)
        assert predict_age(shifted, "argmax_representative") == predict_age(
            BranchOutputs({1: logits}, None), "argmax_representative"
        )

    def test_regression(self):
        assert predict_age(BranchOutputs({}, 37.25), "regression") == 37.25

    def test_fused_averages_every_branch(self):
        logits = {w: np.zeros(100 // w) for w in (1, 5, 10, 20)}
        outputs = BranchOutputs(logits, 60.5)
        assert predict_age(outputs, "fused") == pytest.approx((4 * 50.5 + 60.5) / 5)

    def test_missing_branch(self):
        with pytest.raises(ModelError):
            predict_age(BranchOutputs({5: np.zeros(20)}, None), "expected_value")
        with pytest.raises(ModelError):
            predict_age(BranchOutputs({1: np.zeros(100)}, None), "regression")

    def test_unknown_policy(self):
        with pytest.raises(ModelError):
            predict_age(BranchOutputs({1: np.zeros(100)}, 1.0), "median")
