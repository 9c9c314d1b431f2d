import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from depthreg.geometry import grad_x, grad_y, ssim_map, warp_horizontal
from depthreg.types import ContractViolation

from conftest import nchw
from oracles import ssim_oracle, warp_oracle


def _warp(src, disp, direction):
    return warp_horizontal(nchw(src), nchw(disp), direction)[0].permute(1, 2, 0).numpy()


class TestWarp:
    def test_zero_disparity_is_identity(self, rng):
        src = rng.random((5, 7, 3))
        out = _warp(src, np.zeros((5, 7)), 1)
        assert np.array_equal(out, src)

    def test_ramp_shifts_one_column(self):
        h, w = 4, 8
        ramp = np.tile(np.arange(w) / (w - 1), (h, 1))[..., None]
        out = _warp(ramp, np.full((h, w), 1.0 / w), 1)
        expected = (np.arange(1, w) / (w - 1))
        np.testing.assert_allclose(out[:, : w - 1, 0], np.tile(expected, (h, 1)), atol=1e-12)

    @pytest.mark.parametrize("direction", [1, -1])
    def test_matches_bruteforce_4x4(self, rng, direction):
        src = rng.random((4, 4, 1))
        disp = rng.uniform(0, 0.25, (4, 4))
        np.testing.assert_allclose(_warp(src, disp, direction), warp_oracle(src, disp, direction), atol=1e-6)

    def test_border_clamps(self):
        src = np.arange(6, dtype=float).reshape(1, 6, 1).repeat(2, axis=0)
        out = _warp(src, np.full((2, 6), 0.9), 1)
        assert np.all(out == 5.0)
        out = _warp(src, np.full((2, 6), 0.9), -1)
        assert np.all(out == 0.0)

    def test_shape_mismatch(self):
        with pytest.raises(ContractViolation):
            warp_horizontal(torch.zeros(1, 3, 4, 4), torch.zeros(1, 1, 4, 5))

    def test_non_finite(self):
        d = torch.zeros(1, 1, 4, 4)
        d[0, 0, 1, 1] = float("nan")
        with pytest.raises(ContractViolation):
            warp_horizontal(torch.zeros(1, 1, 4, 4), d)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (5, 6, 2), elements=st.floats(-3, 3)),
           arrays(np.float64, (5, 6), elements=st.floats(0, 0.3)),
           st.sampled_from([1, -1]))
    def test_output_within_source_range(self, src, disp, direction):
        out = _warp(src, disp, direction)
        assert out.min() >= src.min() - 1e-12
        assert out.max() <= src.max() + 1e-12

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, (3, 4, 1), elements=st.floats(-5, 5)))
    def test_identity_property(self, src):
        assert np.array_equal(_warp(src, np.zeros((3, 4)), -1), src)


class TestSSIM:
    def test_identical_images(self, rng):
        a = rng.random((6, 7, 3))
        s = ssim_map(nchw(a), nchw(a))
        np.testing.assert_allclose(s.numpy(), 1.0, atol=1e-12)

    def test_symmetric(self, rng):
        a, b = rng.random((6, 6, 3)), rng.random((6, 6, 3))
        assert torch.equal(ssim_map(nchw(a), nchw(b)), ssim_map(nchw(b), nchw(a)))

    def test_matches_direct_formula(self):
        y, x = np.mgrid[0:8, 0:8]
        a = ((x + 2 * y) % 5 / 4.0)[..., None]
        b = (0.5 + 0.4 * np.sin(x * 0.9) * np.cos(y * 0.7))[..., None]
        got = ssim_map(nchw(a), nchw(b))[0, 0].numpy()
        np.testing.assert_allclose(got, ssim_oracle(a, b), atol=1e-6)

    def test_multichannel_average(self, rng):
        a, b = rng.random((5, 5, 3)), rng.random((5, 5, 3))
        got = ssim_map(nchw(a), nchw(b))[0, 0].numpy()
        np.testing.assert_allclose(got, ssim_oracle(a, b), atol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ContractViolation):
            ssim_map(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 4, 5))

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (4, 5, 1), elements=st.floats(0, 1)),
           arrays(np.float64, (4, 5, 1), elements=st.floats(0, 1)))
    def test_range(self, a, b):
        s = ssim_map(nchw(a), nchw(b)).numpy()
        assert np.all(s <= 1 + 1e-6) and np.all(s >= -1 - 1e-6)


class TestFiniteDifferences:
    def test_constant(self):
        g = torch.full((1, 1, 4, 5), 3.0)
        assert torch.all(grad_x(g) == 0) and torch.all(grad_y(g) == 0)

    def test_ramp(self):
        g = torch.arange(5.0).repeat(4, 1)[None, None]
        gx = grad_x(g)[0, 0]
        assert torch.all(gx[:, :-1] == 1) and torch.all(gx[:, -1] == 0)
        assert torch.all(grad_y(g) == 0)

    def test_explicit_loop(self, rng):
        g = rng.random((3, 3))
        ex, ey = np.zeros((3, 3)), np.zeros((3, 3))
        for y in range(3):
            for x in range(3):
                if x < 2:
                    ex[y, x] = g[y, x + 1] - g[y, x]
                if y < 2:
                    ey[y, x] = g[y + 1, x] - g[y, x]
        t = torch.from_numpy(g)[None, None]
        assert np.array_equal(grad_x(t)[0, 0].numpy(), ex)
        assert np.array_equal(grad_y(t)[0, 0].numpy(), ey)
