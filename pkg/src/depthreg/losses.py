"""Segmentation and self-supervised depth objectives."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F

from depthreg.geometry import downsample2x, grad_x, grad_y, ssim_map, warp_horizontal
from depthreg.types import NUM_CLASSES, ContractViolation

NUM_SCALES = 4
CE_CLAMP = 1e-7
DICE_SMOOTH = 1e-6


@dataclass
class SegLossWeights:
    alpha_ce: float = 0.5


@dataclass
class DepthLossWeights:
    alpha_ap: float = 1.0
    alpha_lr: float = 1.0
    alpha_ds: float = 0.1
    gamma: float = 0.85


@dataclass
class DisparityPyramid:
    """Left/right disparity maps, finest scale first, each ``(N, 1, H_i, W_i)``."""

    left: list[torch.Tensor] = field(default_factory=list)
    right: list[torch.Tensor] = field(default_factory=list)

    def __post_init__(self):
        if len(self.left) != NUM_SCALES or len(self.right) != NUM_SCALES:
            raise ContractViolation(
                f"pyramid needs {NUM_SCALES} scales per side, got {len(self.left)}/{len(self.right)}"
            )


def one_hot(labels: torch.Tensor, num_classes: int = NUM_CLASSES) -> torch.Tensor:
    """``(N, H, W)`` integer labels to ``(N, K, H, W)`` float one-hot."""
    return F.one_hot(labels.long(), num_classes).permute(0, 3, 1, 2).to(torch.get_default_dtype())


def average_seg_heads(heads: Sequence[torch.Tensor]) -> torch.Tensor:
    if len(heads) != 4:
        raise ContractViolation(f"expected 4 segmentation heads, got {len(heads)}")
    return torch.stack(list(heads), dim=0).mean(dim=0)


def seg_loss(annotation: torch.Tensor, prediction: torch.Tensor, w: SegLossWeights | None = None) -> torch.Tensor:
    """``alpha_ce * CE + (1 - Dice)`` averaged over the batch.

    ``annotation`` is either integer labels ``(N, H, W)`` or a one-hot
    ``(N, K, H, W)`` grid; ``prediction`` holds per-pixel probabilities
    ``(N, K, H, W)``. Dice is the soft multi-class Dice averaged over the
    classes present in each sample's annotation.
    """
    w = w or SegLossWeights()
    if annotation.dim() == 3:
        annotation = one_hot(annotation, prediction.shape[1]).to(prediction.dtype)
    if annotation.shape != prediction.shape:
        raise ContractViolation(f"shape mismatch: {tuple(annotation.shape)} vs {tuple(prediction.shape)}")
    row_err = (prediction.detach().sum(dim=1) - 1.0).abs().max().item()
    if row_err > 1e-5:
        raise ContractViolation(f"prediction rows not normalized (max deviation {row_err:.3g})")

    logp = torch.log(prediction.clamp(min=CE_CLAMP))
    ce = -(annotation * logp).sum(dim=1).mean(dim=(1, 2))

    inter = (annotation * prediction).sum(dim=(2, 3))
    denom = annotation.sum(dim=(2, 3)) + prediction.sum(dim=(2, 3))
    dice_k = (2 * inter + DICE_SMOOTH) / (denom + DICE_SMOOTH)
    present = (annotation.sum(dim=(2, 3)) > 0).to(prediction.dtype)
    dice = (dice_k * present).sum(dim=1) / present.sum(dim=1)

    return (w.alpha_ce * ce + (1.0 - dice)).mean()


def _check_same_hw(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape[0] != b.shape[0] or a.shape[-2:] != b.shape[-2:]:
        raise ContractViolation(f"scale mismatch in {what}: {tuple(a.shape)} vs {tuple(b.shape)}")


def reconstruct(I_l: torch.Tensor, I_r: torch.Tensor, d: torch.Tensor, side: str) -> tuple[torch.Tensor, torch.Tensor]:
    """Return ``(target, reconstruction)`` for the given side."""
    if side == "left":
        return I_l, warp_horizontal(I_r, d, +1)
    if side == "right":
        return I_r, warp_horizontal(I_l, d, -1)
    raise ContractViolation(f"side must be 'left' or 'right', got {side!r}")


def appearance_loss(I_l: torch.Tensor, I_r: torch.Tensor, d: torch.Tensor, side: str, gamma: float = 0.85) -> torch.Tensor:
    _check_same_hw(I_l, d, "appearance_loss")
    _check_same_hw(I_r, d, "appearance_loss")
    target, recon = reconstruct(I_l, I_r, d, side)
    ssim_term = (1.0 - ssim_map(target, recon)) / 2.0
    l1_term = (target - recon).abs().mean(dim=1, keepdim=True)
    return (gamma * ssim_term + (1.0 - gamma) * l1_term).mean()


def lr_consistency_loss(d_l: torch.Tensor, d_r: torch.Tensor, side: str) -> torch.Tensor:
    """Mean ``|d_l(x) - d_l(x + d_r(x) W)|`` for the left side; mirrored for the right."""
    _check_same_hw(d_l, d_r, "lr_consistency_loss")
    if side == "left":
        return (d_l - warp_horizontal(d_l, d_r, +1)).abs().mean()
    if side == "right":
        return (d_r - warp_horizontal(d_r, d_l, -1)).abs().mean()
    raise ContractViolation(f"side must be 'left' or 'right', got {side!r}")


def smoothness_loss(I: torch.Tensor, d: torch.Tensor) -> torch.Tensor:
    """Edge-aware first-order disparity smoothness."""
    _check_same_hw(I, d, "smoothness_loss")
    wx = torch.exp(-grad_x(I).abs().mean(dim=1, keepdim=True))
    wy = torch.exp(-grad_y(I).abs().mean(dim=1, keepdim=True))
    return (grad_x(d).abs() * wx + grad_y(d).abs() * wy).mean()


def image_pyramid(img: torch.Tensor, n: int = NUM_SCALES) -> list[torch.Tensor]:
    out = [img]
    for _ in range(n - 1):
        out.append(downsample2x(out[-1]))
    return out


def depth_loss_terms(left: torch.Tensor, right: torch.Tensor, pyramid: DisparityPyramid,
                     w: DepthLossWeights | None = None) -> dict[str, torch.Tensor]:
    """Unweighted per-term sums over scales: ``ap``, ``lr``, ``ds`` (both sides)."""
    w = w or DepthLossWeights()
    lefts, rights = image_pyramid(left), image_pyramid(right)
    terms = {"ap": 0.0, "lr": 0.0, "ds": 0.0}
    for i in range(NUM_SCALES):
        I_l, I_r = lefts[i], rights[i]
        d_l, d_r = pyramid.left[i], pyramid.right[i]
        _check_same_hw(I_l, d_l, f"depth_loss scale {i}")
        terms["ap"] = terms["ap"] + appearance_loss(I_l, I_r, d_l, "left", w.gamma) \
            + appearance_loss(I_l, I_r, d_r, "right", w.gamma)
        terms["lr"] = terms["lr"] + lr_consistency_loss(d_l, d_r, "left") + lr_consistency_loss(d_l, d_r, "right")
        terms["ds"] = terms["ds"] + smoothness_loss(I_l, d_l) + smoothness_loss(I_r, d_r)
    return terms


def depth_loss(left: torch.Tensor, right: torch.Tensor, pyramid: DisparityPyramid,
               w: DepthLossWeights | None = None) -> torch.Tensor:
    w = w or DepthLossWeights()
    t = depth_loss_terms(left, right, pyramid, w)
    return w.alpha_ap * t["ap"] + w.alpha_lr * t["lr"] + w.alpha_ds * t["ds"]
