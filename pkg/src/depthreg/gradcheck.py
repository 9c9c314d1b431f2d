"""Central finite-difference checks of the analytic gradients.

Every case builds a random double-precision 6x6 instance whose sampling
coordinates stay away from the clamp border and from integer cell edges, then
compares autograd against central differences input by input. The error per
input tensor is ``||g_auto - g_fd|| / max(||g_auto||, ||g_fd||)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from depthreg.geometry import ssim_map, warp_horizontal
from depthreg.losses import appearance_loss, lr_consistency_loss, seg_loss, smoothness_loss

STEP = 1e-5
TOLERANCE = 1e-3
SIZE = 6


def finite_difference_grad(f: Callable[..., torch.Tensor], inputs: list[torch.Tensor], step: float = STEP) -> list[torch.Tensor]:
    grads = []
    for k, x in enumerate(inputs):
        g = torch.zeros_like(x)
        flat, gflat = x.view(-1), g.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            hi = f(*inputs).item()
            flat[i] = orig - step
            lo = f(*inputs).item()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * step)
        grads.append(g)
    return grads


def analytic_grad(f, inputs: list[torch.Tensor]) -> list[torch.Tensor]:
    leaves = [x.detach().clone().requires_grad_(True) for x in inputs]
    out = f(*leaves)
    return list(torch.autograd.grad(out, leaves))


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(a.norm().item(), b.norm().item())
    if denom == 0.0:
        return 0.0
    return (a - b).norm().item() / denom


def interior_disparity(rng: np.random.Generator, h: int, w: int, direction: int) -> torch.Tensor:
    """Disparity whose sample points sit strictly inside an interpolation cell.

    Pixels that cannot reach an interior point (the last column for +1, the
    first for -1) get a disparity deep in the clamped zone, where both
    gradients are exactly zero.
    """
    d = np.empty((h, w))
    for y in range(h):
        for x in range(w):
            room = (w - 1 - x) if direction > 0 else x
            if room < 1:
                d[y, x] = 1.5 / w
                continue
            k = rng.integers(0, min(room, 2))
            shift = k + rng.uniform(0.15, 0.85)
            d[y, x] = shift / w
    return torch.from_numpy(d).view(1, 1, h, w)


@dataclass
class CaseResult:
    name: str
    instances: int
    max_rel_error: float
    passed: bool


def _cases(rng: np.random.Generator) -> dict[str, Callable[[], tuple[Callable, list[torch.Tensor]]]]:
    s = SIZE

    def rand(*shape):
        return torch.from_numpy(rng.uniform(0.05, 0.95, size=shape))

    def warp_case():
        direction = int(rng.choice([1, -1]))
        c = int(rng.choice([1, 3]))
        src = rand(1, c, s, s)
        d = interior_disparity(rng, s, s, direction)
        wts = torch.from_numpy(rng.normal(size=(1, c, s, s)))
        return (lambda a, b: (warp_horizontal(a, b, direction) * wts).sum()), [src, d]

    def ssim_case():
        wts = torch.from_numpy(rng.normal(size=(1, 1, s, s)))
        return (lambda a, b: (ssim_map(a, b) * wts).sum()), [rand(1, 3, s, s), rand(1, 3, s, s)]

    def seg_case():
        labels = torch.from_numpy(rng.integers(0, 5, size=(1, s, s)))
        logits = torch.from_numpy(rng.normal(size=(1, 5, s, s)))
        return (lambda z: seg_loss(labels, torch.softmax(z, dim=1))), [logits]

    def appearance_case():
        side = str(rng.choice(["left", "right"]))
        d = interior_disparity(rng, s, s, 1 if side == "left" else -1)
        gamma = float(rng.uniform(0.5, 1.0))
        return (lambda il, ir, dd: appearance_loss(il, ir, dd, side, gamma)), [rand(1, 3, s, s), rand(1, 3, s, s), d]

    def lr_case():
        side = str(rng.choice(["left", "right"]))
        sampler = interior_disparity(rng, s, s, 1 if side == "left" else -1)
        other = rand(1, 1, s, s) * 0.3
        d_l, d_r = (other, sampler) if side == "left" else (sampler, other)
        return (lambda a, b: lr_consistency_loss(a, b, side)), [d_l, d_r]

    def smooth_case():
        return smoothness_loss, [rand(1, 3, s, s), rand(1, 1, s, s) * 0.3]

    return {
        "warp_horizontal": warp_case,
        "ssim_map": ssim_case,
        "seg_loss": seg_case,
        "appearance_loss": appearance_case,
        "lr_consistency_loss": lr_case,
        "smoothness_loss": smooth_case,
    }


def run_suite(instances: int = 20, seed: int = 0, names=None) -> list[CaseResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, make in _cases(rng).items():
        if names and name not in names:
            continue
        worst = 0.0
        for _ in range(instances):
            f, inputs = make()
            inputs = [x.to(torch.float64).contiguous() for x in inputs]
            auto = analytic_grad(f, inputs)
            numeric = finite_difference_grad(f, [x.clone() for x in inputs])
            worst = max(worst, *(relative_error(a, n) for a, n in zip(auto, numeric)))
        results.append(CaseResult(name, instances, worst, worst <= TOLERANCE))
    return results


def format_table(results: list[CaseResult]) -> str:
    lines = [f"{'function':<22}{'n':>4}  {'max rel err':>12}  result"]
    for r in results:
        lines.append(f"{r.name:<22}{r.instances:>4}  {r.max_rel_error:>12.3e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
