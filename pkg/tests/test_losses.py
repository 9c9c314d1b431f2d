import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from depthreg.geometry import downsample2x, warp_horizontal
from depthreg.losses import (
    DepthLossWeights,
    DisparityPyramid,
    SegLossWeights,
    appearance_loss,
    average_seg_heads,
    depth_loss,
    depth_loss_terms,
    lr_consistency_loss,
    one_hot,
    seg_loss,
    smoothness_loss,
)
from depthreg.types import ContractViolation

from conftest import nchw
from oracles import smoothness_oracle, ssim_oracle, warp_oracle


@pytest.fixture(autouse=True)
def _double_precision():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


def _softmax(rng, n, k, h, w):
    return torch.softmax(torch.from_numpy(rng.normal(size=(n, k, h, w))), dim=1)


def _pyramid(rng, n=1, h=16, w=16, value=None):
    sides = []
    for _ in range(2):
        scales = []
        for i in range(4):
            shape = (n, 1, h >> i, w >> i)
            scales.append(torch.full(shape, value) if value is not None else torch.from_numpy(rng.uniform(0, 0.2, shape)))
        sides.append(scales)
    return DisparityPyramid(*sides)


# ---------------------------------------------------------------- segmentation

class TestSegLoss:
    def test_perfect_prediction_is_zero(self, rng):
        labels = torch.from_numpy(rng.integers(0, 5, (2, 6, 6)))
        pred = one_hot(labels, 5).double()
        assert seg_loss(labels, pred).item() == pytest.approx(0.0, abs=1e-6)

    def test_uniform_two_class_oracle(self):
        labels = torch.tensor([[[0, 1], [1, 0]]])
        pred = torch.full((1, 2, 2, 2), 0.5)
        s = 1e-6
        dice = (2 * 1.0 + s) / (4.0 + s)
        expected = 0.5 * math.log(2) + (1 - dice)
        assert seg_loss(labels, pred).item() == pytest.approx(expected, abs=1e-12)

    def test_uniform_five_class_closed_form(self):
        labels = torch.arange(5).view(1, 5, 1)
        pred = torch.full((1, 5, 5, 1), 0.2)
        s = 1e-6
        dice = (0.4 + s) / (2.0 + s)
        assert seg_loss(labels, pred).item() == pytest.approx(0.5 * math.log(5) + 1 - dice, abs=1e-12)

    def test_alpha_weight(self, rng):
        labels = torch.from_numpy(rng.integers(0, 5, (1, 4, 4)))
        pred = _softmax(rng, 1, 5, 4, 4)
        a = seg_loss(labels, pred, SegLossWeights(alpha_ce=0.0)).item()
        b = seg_loss(labels, pred, SegLossWeights(alpha_ce=1.0)).item()
        ce = -(one_hot(labels, 5) * pred.log()).sum(1).mean().item()
        assert b - a == pytest.approx(ce, abs=1e-12)

    def test_onehot_and_label_forms_agree(self, rng):
        labels = torch.from_numpy(rng.integers(0, 5, (2, 5, 5)))
        pred = _softmax(rng, 2, 5, 5, 5)
        assert seg_loss(labels, pred).item() == seg_loss(one_hot(labels, 5).double(), pred).item()

    def test_batch_mean(self, rng):
        labels = torch.from_numpy(rng.integers(0, 5, (3, 4, 4)))
        pred = _softmax(rng, 3, 5, 4, 4)
        each = [seg_loss(labels[i:i + 1], pred[i:i + 1]).item() for i in range(3)]
        assert seg_loss(labels, pred).item() == pytest.approx(np.mean(each), abs=1e-12)

    def test_rejects_unnormalized(self):
        with pytest.raises(ContractViolation):
            seg_loss(torch.zeros(1, 2, 2, dtype=torch.long), torch.full((1, 5, 2, 2), 0.3))

    def test_rejects_shape_mismatch(self, rng):
        with pytest.raises(ContractViolation):
            seg_loss(torch.zeros(1, 3, 3, 3), _softmax(rng, 1, 5, 3, 3))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.permutations(list(range(5))))
    def test_class_permutation_equivariance(self, seed, perm):
        r = np.random.default_rng(seed)
        labels = torch.from_numpy(r.integers(0, 5, (1, 4, 4)))
        pred = _softmax(r, 1, 5, 4, 4)
        oh = one_hot(labels, 5).double()
        a = seg_loss(oh, pred).item()
        b = seg_loss(oh[:, perm], pred[:, perm]).item()
        assert a == pytest.approx(b, abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_nonnegative(self, seed):
        r = np.random.default_rng(seed)
        labels = torch.from_numpy(r.integers(0, 5, (2, 3, 3)))
        assert seg_loss(labels, _softmax(r, 2, 5, 3, 3)).item() >= 0.0


def test_average_seg_heads(rng):
    heads = [_softmax(rng, 1, 5, 4, 4) for _ in range(4)]
    avg = average_seg_heads(heads)
    assert torch.allclose(avg, sum(heads) / 4)
    assert torch.allclose(avg.sum(1), torch.ones(1, 4, 4))
    with pytest.raises(ContractViolation):
        average_seg_heads(heads[:3])


# ---------------------------------------------------------------- depth terms

class TestAppearance:
    @pytest.mark.parametrize("side", ["left", "right"])
    def test_identical_pair_zero_disparity(self, rng, side):
        img = torch.from_numpy(rng.random((1, 3, 8, 8)))
        assert appearance_loss(img, img.clone(), torch.zeros(1, 1, 8, 8), side).item() == pytest.approx(0, abs=1e-6)

    def test_gamma_zero_is_l1(self, rng):
        a, b = torch.from_numpy(rng.random((1, 3, 6, 6))), torch.from_numpy(rng.random((1, 3, 6, 6)))
        d = torch.from_numpy(rng.uniform(0, 0.2, (1, 1, 6, 6)))
        expected = (a - warp_horizontal(b, d, 1)).abs().mean().item()
        assert appearance_loss(a, b, d, "left", gamma=0.0).item() == pytest.approx(expected, abs=1e-12)

    def test_right_side_uses_left_image(self, rng):
        a, b = torch.from_numpy(rng.random((1, 1, 6, 6))), torch.from_numpy(rng.random((1, 1, 6, 6)))
        d = torch.from_numpy(rng.uniform(0, 0.2, (1, 1, 6, 6)))
        expected = (b - warp_horizontal(a, d, -1)).abs().mean().item()
        assert appearance_loss(a, b, d, "right", gamma=0.0).item() == pytest.approx(expected, abs=1e-12)

    def test_true_shift_recovered(self):
        w = 16
        x = torch.arange(w, dtype=torch.float64)
        right = (0.5 + 0.4 * torch.sin(x * 0.7)).view(1, 1, 1, w).repeat(1, 1, 8, 1)
        left = torch.cat([right[..., 2:], right[..., -1:].repeat(1, 1, 1, 2)], dim=3)
        d_true = torch.full((1, 1, 8, w), 2.0 / w)
        at_true = appearance_loss(left, right, d_true, "left").item()
        at_zero = appearance_loss(left, right, torch.zeros_like(d_true), "left").item()
        assert at_true < 1e-6 < at_zero

    def test_rejects_scale_mismatch(self, rng):
        with pytest.raises(ContractViolation):
            appearance_loss(torch.zeros(1, 3, 8, 8), torch.zeros(1, 3, 8, 8), torch.zeros(1, 1, 4, 4), "left")

    def test_rejects_bad_side(self):
        z = torch.zeros(1, 1, 4, 4)
        with pytest.raises(ContractViolation):
            appearance_loss(z, z, z, "top")


class TestLRConsistency:
    @settings(max_examples=30, deadline=None)
    @given(st.floats(0, 0.3), st.floats(0, 0.3), st.sampled_from(["left", "right"]))
    def test_constant_disparity_is_zero(self, a, b, side):
        d_l, d_r = torch.full((1, 1, 6, 6), a), torch.full((1, 1, 6, 6), b)
        assert lr_consistency_loss(d_l, d_r, side).item() == pytest.approx(0.0, abs=1e-12)

    def test_zero_sampler_is_zero(self, rng):
        d = torch.from_numpy(rng.uniform(0, 0.3, (1, 1, 5, 5)))
        assert lr_consistency_loss(d, torch.zeros_like(d), "left").item() == 0.0
        assert lr_consistency_loss(torch.zeros_like(d), d, "right").item() == 0.0

    def test_step_oracle(self):
        # d_l = [0, 0, 1/4, 1/4], sampled one column right by d_r = 1/4.
        d_l = torch.tensor([0.0, 0.0, 0.25, 0.25]).view(1, 1, 1, 4)
        d_r = torch.full((1, 1, 1, 4), 0.25)
        # warped = [0, 0.25, 0.25, 0.25]; |diff| = [0, 0.25, 0, 0]
        assert lr_consistency_loss(d_l, d_r, "left").item() == pytest.approx(0.0625, abs=1e-12)


class TestSmoothness:
    def test_one_by_four_oracle(self):
        img = torch.full((1, 3, 1, 4), 0.5)
        d = torch.tensor([0.0, 0.0, 1.0, 1.0]).view(1, 1, 1, 4)
        assert smoothness_loss(img, d).item() == pytest.approx(0.25, abs=1e-12)

    def test_edge_weighting(self):
        img = torch.tensor([0.0, 0.0, 1.0, 1.0]).view(1, 1, 1, 4)
        d = torch.tensor([0.0, 0.0, 1.0, 1.0]).view(1, 1, 1, 4)
        assert smoothness_loss(img, d).item() == pytest.approx(0.25 * math.exp(-1), abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0, 0.3), st.integers(0, 2 ** 32 - 1))
    def test_constant_disparity_is_zero(self, c, seed):
        img = torch.from_numpy(np.random.default_rng(seed).random((1, 3, 5, 5)))
        assert smoothness_loss(img, torch.full((1, 1, 5, 5), c)).item() == 0.0


class TestDepthLoss:
    def test_explicit_24_term_sum(self, rng):
        left = torch.from_numpy(rng.random((2, 3, 16, 16)))
        right = torch.from_numpy(rng.random((2, 3, 16, 16)))
        pyr = _pyramid(rng, n=2)
        w = DepthLossWeights(alpha_ap=0.7, alpha_lr=1.3, alpha_ds=0.1, gamma=0.85)
        total, count = 0.0, 0
        I_l, I_r = left, right
        for i in range(4):
            if i:
                I_l, I_r = downsample2x(I_l), downsample2x(I_r)
            d_l, d_r = pyr.left[i], pyr.right[i]
            for side, d, I in (("left", d_l, I_l), ("right", d_r, I_r)):
                total += w.alpha_ap * appearance_loss(I_l, I_r, d, side, w.gamma).item()
                total += w.alpha_lr * lr_consistency_loss(d_l, d_r, side).item()
                total += w.alpha_ds * smoothness_loss(I, d).item()
                count += 3
        assert count == 24
        assert depth_loss(left, right, pyr, w).item() == pytest.approx(total, rel=1e-12)

    def test_terms_recombine(self, rng):
        left = torch.from_numpy(rng.random((1, 3, 16, 16)))
        pyr = _pyramid(rng)
        t = depth_loss_terms(left, left, pyr)
        w = DepthLossWeights()
        combined = w.alpha_ap * t["ap"] + w.alpha_lr * t["lr"] + w.alpha_ds * t["ds"]
        assert depth_loss(left, left, pyr).item() == pytest.approx(combined.item(), rel=1e-12)

    def test_identical_pair_zero_disparity(self, rng):
        img = torch.from_numpy(rng.random((1, 3, 16, 16)))
        assert depth_loss(img, img.clone(), _pyramid(rng, value=0.0)).item() == pytest.approx(0.0, abs=1e-6)

    def test_pyramid_requires_four_scales(self):
        with pytest.raises(ContractViolation):
            DisparityPyramid([torch.zeros(1, 1, 4, 4)] * 3, [torch.zeros(1, 1, 4, 4)] * 3)

    def test_scale_mismatch_detected(self, rng):
        pyr = _pyramid(rng, h=16, w=16)
        with pytest.raises(ContractViolation):
            depth_loss(torch.zeros(1, 3, 32, 32), torch.zeros(1, 3, 32, 32), pyr)


# ---------------------------------------------------------------- composed oracles

def test_seg_hand_evaluated_two_by_two():
    labels = torch.tensor([[[1, 0], [0, 1]]])
    p1 = torch.tensor([[0.8, 0.3], [0.4, 0.9]])
    pred = torch.stack([1 - p1, p1])[None]
    s = 1e-6
    ce = -(math.log(0.8) + math.log(0.7) + math.log(0.6) + math.log(0.9)) / 4
    dice1 = (2 * 1.7 + s) / (2 + 2.4 + s)
    dice0 = (2 * 1.3 + s) / (2 + 1.6 + s)
    expected = 0.5 * ce + 1 - (dice0 + dice1) / 2
    assert seg_loss(labels, pred).item() == pytest.approx(expected, abs=1e-6)


def test_uniform_on_single_class_image_ce_is_ln5():
    labels = torch.zeros(1, 3, 3, dtype=torch.long)
    pred = torch.full((1, 5, 3, 3), 0.2)
    only_dice = seg_loss(labels, pred, SegLossWeights(alpha_ce=0.0)).item()
    assert seg_loss(labels, pred).item() - only_dice == pytest.approx(0.5 * math.log(5), abs=1e-12)


def test_average_of_identical_heads(rng):
    h = _softmax(rng, 1, 5, 3, 3)
    assert torch.allclose(average_seg_heads([h, h, h, h]), h)


def test_average_of_distinct_one_hot_heads():
    heads = [one_hot(torch.full((1, 1, 1), k), 5).double() for k in (1, 2, 3, 4)]
    avg = average_seg_heads(heads)[0, :, 0, 0]
    assert avg.tolist() == [0.0, 0.25, 0.25, 0.25, 0.25]


def test_appearance_matches_chained_oracles(rng):
    left, right = rng.random((8, 8, 3)), rng.random((8, 8, 3))
    d = np.full((8, 8), 1.5 / 8)
    recon = warp_oracle(right, d, 1)
    ssim = ssim_oracle(left, recon)
    l1 = np.abs(left - recon).mean(axis=2)
    expected = (0.85 * (1 - ssim) / 2 + 0.15 * l1).mean()
    got = appearance_loss(nchw(left), nchw(right), nchw(d), "left", 0.85).item()
    assert got == pytest.approx(expected, abs=1e-6)


def test_lr_consistency_one_by_four_interpolation_oracle():
    d_l = np.array([0.10, 0.20, 0.05, 0.15])
    d_r = np.array([0.10, 0.30, 0.20, 0.00])
    expected = []
    for x in range(4):
        s = min(max(x + d_r[x] * 4, 0), 3)
        x0 = min(int(math.floor(s)), 2)
        t = s - x0
        expected.append(abs(d_l[x] - ((1 - t) * d_l[x0] + t * d_l[x0 + 1])))
    got = lr_consistency_loss(torch.tensor(d_l).view(1, 1, 1, 4), torch.tensor(d_r).view(1, 1, 1, 4), "left")
    assert got.item() == pytest.approx(np.mean(expected), abs=1e-6)


def test_smoothness_matches_loop_oracle(rng):
    img, d = rng.random((3, 3, 3)), rng.random((3, 3))
    assert smoothness_loss(nchw(img), nchw(d)).item() == pytest.approx(smoothness_oracle(img, d), abs=1e-6)


def test_zero_weights_give_zero_depth_loss(rng):
    a, b = torch.from_numpy(rng.random((1, 3, 16, 16))), torch.from_numpy(rng.random((1, 3, 16, 16)))
    w = DepthLossWeights(alpha_ap=0.0, alpha_lr=0.0, alpha_ds=0.0)
    assert depth_loss(a, b, _pyramid(rng), w).item() == 0.0
