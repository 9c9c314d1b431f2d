"""Differentiable image-space primitives used by the depth losses.

All functions operate on batched torch tensors:

* images are ``(N, C, H, W)`` with ``C`` in ``{1, 3}``,
* disparities are ``(N, 1, H, W)`` in units of image width (``d * W`` pixels).

Warping convention: the left view is reconstructed by sampling the right view
at ``x + d_left * W`` (``direction=+1``); the right view is reconstructed by
sampling the left view at ``x - d_right * W`` (``direction=-1``).
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from depthreg.types import ContractViolation

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _check_finite(name: str, t: torch.Tensor) -> None:
    if not torch.isfinite(t).all():
        raise ContractViolation(f"{name} contains non-finite values")


def warp_horizontal(source: torch.Tensor, disparity: torch.Tensor, direction: int = 1) -> torch.Tensor:
    """Resample ``source`` along rows at ``x + direction * disparity * W``.

    Linear interpolation between the two neighbouring columns; sample
    coordinates outside ``[0, W - 1]`` are clamped to the border. Gradients
    flow to both ``source`` and ``disparity``.
    """
    if direction not in (1, -1):
        raise ContractViolation(f"direction must be +1 or -1, got {direction}")
    if source.dim() != 4 or disparity.dim() != 4 or disparity.shape[1] != 1:
        raise ContractViolation(
            f"expected source (N,C,H,W) and disparity (N,1,H,W), got {tuple(source.shape)} and {tuple(disparity.shape)}"
        )
    n, c, h, w = source.shape
    if disparity.shape[0] != n or disparity.shape[2:] != (h, w):
        raise ContractViolation(f"shape mismatch: source {tuple(source.shape)} vs disparity {tuple(disparity.shape)}")
    _check_finite("source", source)
    _check_finite("disparity", disparity)

    base = torch.arange(w, dtype=source.dtype, device=source.device).view(1, 1, 1, w)
    x = (base + direction * disparity * w).clamp(0.0, w - 1.0)
    x0 = x.detach().floor().clamp(max=w - 2) if w > 1 else x.detach().floor()
    frac = x - x0
    i0 = x0.long()
    i1 = (i0 + 1).clamp(max=w - 1)
    i0 = i0.expand(n, c, h, w)
    i1 = i1.expand(n, c, h, w)
    v0 = torch.gather(source, 3, i0)
    v1 = torch.gather(source, 3, i1)
    return (1.0 - frac) * v0 + frac * v1


def ssim_map(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-pixel SSIM over 3x3 windows, averaged over channels.

    Borders use reflection padding so the output keeps the input's ``H x W``.
    Returns a ``(N, 1, H, W)`` map.
    """
    if a.shape != b.shape:
        raise ContractViolation(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() != 4:
        raise ContractViolation(f"expected (N,C,H,W), got {tuple(a.shape)}")
    a = F.pad(a, (1, 1, 1, 1), mode="reflect")
    b = F.pad(b, (1, 1, 1, 1), mode="reflect")
    mu_a = F.avg_pool2d(a, 3, 1)
    mu_b = F.avg_pool2d(b, 3, 1)
    var_a = F.avg_pool2d(a * a, 3, 1) - mu_a ** 2
    var_b = F.avg_pool2d(b * b, 3, 1) - mu_b ** 2
    cov = F.avg_pool2d(a * b, 3, 1) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return (num / den).mean(dim=1, keepdim=True)


def grad_x(g: torch.Tensor) -> torch.Tensor:
    """Forward difference along the last axis; the last column is zero."""
    out = torch.zeros_like(g)
    out[..., :, :-1] = g[..., :, 1:] - g[..., :, :-1]
    return out


def grad_y(g: torch.Tensor) -> torch.Tensor:
    """Forward difference along the second-to-last axis; the last row is zero."""
    out = torch.zeros_like(g)
    out[..., :-1, :] = g[..., 1:, :] - g[..., :-1, :]
    return out


def downsample2x(t: torch.Tensor) -> torch.Tensor:
    """Bilinear 2x reduction (equivalent to 2x2 averaging for even sizes)."""
    return F.interpolate(t, scale_factor=0.5, mode="bilinear", align_corners=False)
