"""Registry of shared feature extractors.

Every builder returns ``(module, feature_dim)`` where ``module`` maps a batch of
images (B, 3, S, S) to pooled features (B, feature_dim).
"""
import logging
from pathlib import Path
from typing import Callable, Dict, Optional, Tuple

import torch
from torch import nn
from torchvision import models as tv_models

from src.exceptions import ModelError

logger = logging.getLogger(__name__)

BackboneBuilder = Callable[[Optional[str]], Tuple[nn.Module, int]]
BACKBONES: Dict[str, BackboneBuilder] = {}
# smallest square input whose feature maps survive every pooling stage
MIN_INPUT_SIZE: Dict[str, int] = {}


def register(name: str, min_input_size: int = 32):
    """Decorator adding a builder to the registry."""

    def wrap(builder: BackboneBuilder) -> BackboneBuilder:
        BACKBONES[name] = builder
        MIN_INPUT_SIZE[name] = min_input_size
        return builder

    return wrap


def _conv_bn(in_ch: int, out_ch: int, stride: int = 1, groups: int = 1) -> nn.Sequential:
    kernel = 3
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=1, groups=groups, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


class DeskNet(nn.Module):
    """Small CNN that trains on CPU in minutes at 32-64 pixel inputs."""

    def __init__(self, width: int = 32):
        super().__init__()
        self.features = nn.Sequential(
            _conv_bn(3, width),
            _conv_bn(width, width, stride=2),
            _conv_bn(width, 2 * width),
            _conv_bn(2 * width, 2 * width, stride=2),
            _conv_bn(2 * width, 4 * width),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
        )
        self.out_features = 4 * width

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.features(x)


class MobileNetV1(nn.Module):
    """MobileNet-V1: depthwise-separable convolutions, width multiplier 1."""

    # (out_channels, stride) for each depthwise-separable block
    CONFIG = [
        (64, 1), (128, 2), (128, 1), (256, 2), (256, 1), (512, 2),
        (512, 1), (512, 1), (512, 1), (512, 1), (512, 1), (1024, 2), (1024, 1),
    ]

    def __init__(self):
        super().__init__()
        layers = [_conv_bn(3, 32, stride=2)]
        in_ch = 32
        for out_ch, stride in self.CONFIG:
            layers.append(_conv_bn(in_ch, in_ch, stride=stride, groups=in_ch))
            layers.append(
                nn.Sequential(
                    nn.Conv2d(in_ch, out_ch, 1, bias=False),
                    nn.BatchNorm2d(out_ch),
                    nn.ReLU(inplace=True),
                )
            )
            in_ch = out_ch
        layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten()]
        self.features = nn.Sequential(*layers)
        self.out_features = in_ch

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.features(x)


def load_weights(module: nn.Module, weights_path: str) -> None:
    """
    Load an externally supplied state dict into a backbone.

    Args:
        module: Backbone module, before its classifier is removed
        weights_path: Path to a ``torch.save``-d state dict

    Raises:
        ModelError: if the file is absent or does not match the architecture
    """
    path = Path(weights_path)
    if not path.is_file():
        raise ModelError(f"Pretrained weights requested but not found: {path}")
    state = torch.load(path, map_location="cpu", weights_only=True)
    if isinstance(state, dict) and "state_dict" in state:
        state = state["state_dict"]
    try:
        module.load_state_dict(state)
    except RuntimeError as e:
        raise ModelError(f"Weights in {path} do not match the backbone: {e}") from e
    logger.info("Loaded pretrained backbone weights from %s", path)


@register("desk")
def build_desk(weights_path: Optional[str] = None) -> Tuple[nn.Module, int]:
    net = DeskNet()
    if weights_path:
        load_weights(net, weights_path)
    return net, net.out_features


@register("mobilenet_v1")
def build_mobilenet_v1(weights_path: Optional[str] = None) -> Tuple[nn.Module, int]:
    net = MobileNetV1()
    if weights_path:
        load_weights(net, weights_path)
    return net, net.out_features


@register("alexnet", min_input_size=63)
def build_alexnet(weights_path: Optional[str] = None) -> Tuple[nn.Module, int]:
    net = tv_models.alexnet(weights=None)
    if weights_path:
        load_weights(net, weights_path)
    dim = net.classifier[-1].in_features
    net.classifier[-1] = nn.Identity()
    return net, dim


@register("resnet50")
def build_resnet50(weights_path: Optional[str] = None) -> Tuple[nn.Module, int]:
    net = tv_models.resnet50(weights=None)
    if weights_path:
        load_weights(net, weights_path)
    dim = net.fc.in_features
    net.fc = nn.Identity()
    return net, dim


@register("densenet121")
def build_densenet121(weights_path: Optional[str] = None) -> Tuple[nn.Module, int]:
    net = tv_models.densenet121(weights=None)
    if weights_path:
        load_weights(net, weights_path)
    dim = net.classifier.in_features
    net.classifier = nn.Identity()
    return net, dim


@register("vgg16_bn")
def build_vgg16_bn(weights_path: Optional[str] = None) -> Tuple[nn.Module, int]:
    net = tv_models.vgg16_bn(weights=None)
    if weights_path:
        load_weights(net, weights_path)
    dim = net.classifier[-1].in_features
    net.classifier[-1] = nn.Identity()
    return net, dim


def build_backbone(name: str, weights_path: Optional[str] = None) -> Tuple[nn.Module, int]:
    """
    Instantiate a registered backbone.

    Args:
        name: Registry identifier
        weights_path: Optional state-dict file to initialize from

    Returns:
        Tuple of (module, feature dimension)
    """
    if name not in BACKBONES:
        raise ModelError(f"Unknown backbone {name!r}; registered: {sorted(BACKBONES)}")
    return BACKBONES[name](weights_path)
