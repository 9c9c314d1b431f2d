"""Nested dense-skip encoder-decoder with segmentation and disparity heads.

Grid layout: node ``(i, j)`` lives at resolution ``H / 2**i``. Column ``j = 0``
is the encoder; ``j > 0`` are decoder nodes with ``i + j <= 4``. Segmentation
heads read ``x[0, 1..4]``; disparity head pairs read the anti-diagonal
``(3, 1), (2, 2), (1, 3), (0, 4)`` and give pyramid scales 3, 2, 1, 0.
A decoder node whose coarser input ``(i + 1, j - 1)`` carries a disparity head
also receives that head's upsampled left/right disparities.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from depthreg.losses import DisparityPyramid
from depthreg.types import NUM_CLASSES, ContractViolation

DEPTH = 5
DISP_NODES = {(3, 1): 3, (2, 2): 2, (1, 3): 1, (0, 4): 0}


@dataclass
class ModelConfig:
    input_size: tuple[int, int] = (384, 384)
    num_classes: int = NUM_CLASSES
    encoder_depth: int = DEPTH
    encoder_kind: str = "resnet50"
    d_max: float = 0.3
    base_channels: int = 16
    encoder_weights: str = ""  # empty = random init, else path to a state_dict
    detach_feedback: bool = True  # disparity fed back into the decoder carries no segmentation gradient

    def validate(self) -> None:
        h, w = self.input_size
        if h % 16 or w % 16 or h <= 0 or w <= 0:
            raise ContractViolation(f"input size must be positive multiples of 16, got {self.input_size}")
        if self.encoder_depth != DEPTH:
            raise ContractViolation(f"only encoder_depth={DEPTH} is supported")
        if self.encoder_kind not in ("tiny", "resnet50"):
            raise ContractViolation(f"unknown encoder kind {self.encoder_kind!r}")
        if not 0 < self.d_max <= 1 or self.d_max * w < 1:
            raise ContractViolation(f"d_max={self.d_max} invalid for width {w}")
        if self.base_channels < 1 or self.num_classes < 2:
            raise ContractViolation("base_channels and num_classes must be positive")


@dataclass
class ModelOutput:
    seg_heads: list[torch.Tensor] | None
    pyramid: DisparityPyramid


def conv_bn_relu(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


class TinyEncoder(nn.Module):
    """One 3x3 conv block at full resolution, then four pool+conv stages."""

    def __init__(self, base: int):
        super().__init__()
        self.channels = [base * 2 ** i for i in range(DEPTH)]
        stages = [conv_bn_relu(3, self.channels[0])]
        for i in range(1, DEPTH):
            stages.append(nn.Sequential(nn.MaxPool2d(2), conv_bn_relu(self.channels[i - 1], self.channels[i])))
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class ResNet50Encoder(nn.Module):
    """ResNet50 trunk mapped onto five rows (full, /2, /4, /8, /16).

    Row 0 is a small full-resolution conv block since the ResNet stem already
    downsamples; ``layer4`` (/32) is not used.
    """

    def __init__(self, weights_path: str = ""):
        super().__init__()
        from torchvision.models import resnet50

        net = resnet50(weights=None)
        if weights_path:
            state = torch.load(weights_path, map_location="cpu", weights_only=True)
            net.load_state_dict(state, strict=False)
        self.channels = [32, 64, 256, 512, 1024]
        self.stages = nn.ModuleList([
            conv_bn_relu(3, 32),
            nn.Sequential(net.conv1, net.bn1, net.relu),
            nn.Sequential(net.maxpool, net.layer1),
            net.layer2,
            net.layer3,
        ])

    def forward(self, x):
        feats = [self.stages[0](x)]
        y = x
        for stage in self.stages[1:]:
            y = stage(y)
            feats.append(y)
        return feats


class DecoderNode(nn.Module):
    """Upsample the coarser inputs, concatenate, then two conv-BN-ReLU layers."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.body = nn.Sequential(conv_bn_relu(cin, cout), conv_bn_relu(cout, cout))

    def forward(self, same_row: list[torch.Tensor], coarser: list[torch.Tensor]):
        size = same_row[0].shape[-2:]
        up = [F.interpolate(c, size=size, mode="bilinear", align_corners=False) for c in coarser]
        return self.body(torch.cat(same_row + up, dim=1))


class DepthSegNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        if config.encoder_kind == "tiny":
            self.encoder = TinyEncoder(config.base_channels)
            dec = list(self.encoder.channels)
        else:
            self.encoder = ResNet50Encoder(config.encoder_weights)
            dec = [32, 64, 128, 256, 512]
        enc = self.encoder.channels
        self.decoder_channels = dec

        def width(i, j):
            return enc[i] if j == 0 else dec[i]

        self.decoder = nn.ModuleDict()
        for j in range(1, DEPTH):
            for i in range(DEPTH - j):
                cin = sum(width(i, l) for l in range(j)) + width(i + 1, j - 1)
                if (i + 1, j - 1) in DISP_NODES:
                    cin += 2
                self.decoder[f"{i}_{j}"] = DecoderNode(cin, dec[i])
        self.seg_heads = nn.ModuleList([nn.Conv2d(dec[0], config.num_classes, 1) for _ in range(4)])
        disp = {}
        for (i, j), scale in DISP_NODES.items():
            disp[str(scale)] = nn.Conv2d(dec[i], 2, 3, padding=1)
        self.disp_heads = nn.ModuleDict(disp)

    def decoder_modules(self) -> list[nn.Module]:
        return [self.decoder, self.seg_heads, self.disp_heads]

    def reset_decoder_and_heads(self) -> None:
        for part in self.decoder_modules():
            for m in part.modules():
                if hasattr(m, "reset_parameters"):
                    m.reset_parameters()

    def _disparity(self, x: torch.Tensor, scale: int) -> tuple[torch.Tensor, torch.Tensor]:
        d = self.config.d_max * torch.sigmoid(self.disp_heads[str(scale)](x))
        return d[:, :1], d[:, 1:]

    def forward(self, image: torch.Tensor, with_seg: bool = True) -> ModelOutput:
        h, w = self.config.input_size
        if image.dim() != 4 or image.shape[1] != 3 or tuple(image.shape[-2:]) != (h, w):
            raise ContractViolation(f"expected input (N,3,{h},{w}), got {tuple(image.shape)}")
        x = {}
        for i, f in enumerate(self.encoder(image)):
            x[i, 0] = f
        disp: dict[int, tuple[torch.Tensor, torch.Tensor]] = {}
        for j in range(1, DEPTH):
            for i in range(DEPTH - j):
                coarser = [x[i + 1, j - 1]]
                if (i + 1, j - 1) in DISP_NODES:
                    fb = disp[DISP_NODES[i + 1, j - 1]]
                    if self.config.detach_feedback:
                        fb = tuple(t.detach() for t in fb)
                    coarser.extend(fb)
                x[i, j] = self.decoder[f"{i}_{j}"]([x[i, l] for l in range(j)], coarser)
                if (i, j) in DISP_NODES:
                    disp[DISP_NODES[i, j]] = self._disparity(x[i, j], DISP_NODES[i, j])
        pyramid = DisparityPyramid(left=[disp[s][0] for s in range(4)], right=[disp[s][1] for s in range(4)])
        seg = None
        if with_seg:
            seg = [torch.softmax(head(x[0, j + 1]), dim=1) for j, head in enumerate(self.seg_heads)]
        return ModelOutput(seg_heads=seg, pyramid=pyramid)


def build(config: ModelConfig) -> DepthSegNet:
    return DepthSegNet(config)


def _inference(model: DepthSegNet, image: torch.Tensor, with_seg: bool) -> ModelOutput:
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            return model(image, with_seg=with_seg)
    finally:
        model.train(was_training)


def infer_segmentation(model: DepthSegNet, image: torch.Tensor) -> torch.Tensor:
    """Per-pixel argmax of the last segmentation head; ties go to the lowest index."""
    return torch.argmax(_inference(model, image, True).seg_heads[3], dim=1)


def infer_depth(model: DepthSegNet, image: torch.Tensor) -> torch.Tensor:
    """Finest-scale left disparity, ``(N, 1, H, W)``."""
    return _inference(model, image, False).pyramid.left[0]
