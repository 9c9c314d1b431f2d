import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from depthreg.losses import seg_loss
from depthreg.model import DepthSegNet, ModelConfig, build, infer_depth, infer_segmentation
from depthreg.types import ContractViolation

from conftest import tiny_config


@pytest.fixture(scope="module")
def tiny():
    torch.manual_seed(0)
    return build(tiny_config())


def test_tiny_shapes(tiny):
    out = tiny(torch.rand(2, 3, 64, 64))
    assert len(out.seg_heads) == 4
    for s in out.seg_heads:
        assert s.shape == (2, 5, 64, 64)
    for side in (out.pyramid.left, out.pyramid.right):
        assert [tuple(d.shape) for d in side] == [(2, 1, 64 >> i, 64 >> i) for i in range(4)]


def test_non_square_input():
    net = build(ModelConfig(input_size=(32, 48), encoder_kind="tiny", base_channels=4))
    out = net(torch.rand(1, 3, 32, 48))
    assert out.pyramid.left[3].shape == (1, 1, 4, 6)


def test_resnet50_shapes():
    torch.manual_seed(0)
    net = build(ModelConfig())
    with torch.no_grad():
        out = net.eval()(torch.rand(1, 3, 384, 384))
    assert [d.shape[-1] for d in out.pyramid.left] == [384, 192, 96, 48]
    assert out.seg_heads[3].shape == (1, 5, 384, 384)


def test_seg_rows_normalized_and_disparity_bounded(tiny):
    out = tiny(torch.rand(1, 3, 64, 64) * 10 - 5)
    for s in out.seg_heads:
        assert torch.allclose(s.sum(1), torch.ones(1, 64, 64), atol=1e-5)
    d_max = tiny.config.d_max
    for d in out.pyramid.left + out.pyramid.right:
        assert d.min() > 0 and d.max() < d_max


def test_zero_disparity_head_gives_half_dmax():
    net = build(tiny_config(d_max=0.2))
    for head in net.disp_heads.values():
        torch.nn.init.zeros_(head.weight)
        torch.nn.init.zeros_(head.bias)
    out = net(torch.rand(1, 3, 64, 64))
    for d in out.pyramid.left + out.pyramid.right:
        assert torch.allclose(d, torch.full_like(d, 0.1))


def test_without_seg(tiny):
    assert tiny(torch.rand(1, 3, 64, 64), with_seg=False).seg_heads is None


def test_rejects_wrong_input(tiny):
    with pytest.raises(ContractViolation):
        tiny(torch.rand(1, 3, 32, 32))
    with pytest.raises(ContractViolation):
        tiny(torch.rand(1, 1, 64, 64))


@pytest.mark.parametrize("kw", [dict(input_size=(30, 64)), dict(encoder_kind="vgg"), dict(d_max=0.0),
                                dict(encoder_depth=4), dict(base_channels=0)])
def test_config_validation(kw):
    base = dict(input_size=(64, 64), encoder_kind="tiny", base_channels=8)
    base.update(kw)
    with pytest.raises(ContractViolation):
        ModelConfig(**base).validate()


def test_deterministic_construction_and_forward():
    x = torch.rand(1, 3, 64, 64)
    outs = []
    for _ in range(2):
        torch.manual_seed(11)
        net = build(tiny_config()).eval()
        with torch.no_grad():
            outs.append(net(x))
    assert torch.equal(outs[0].seg_heads[3], outs[1].seg_heads[3])
    assert torch.equal(outs[0].pyramid.left[0], outs[1].pyramid.left[0])


def test_every_parameter_receives_gradient():
    torch.manual_seed(0)
    net = build(tiny_config())
    out = net(torch.rand(2, 3, 64, 64))
    total = sum(s.square().sum() for s in out.seg_heads)
    total = total + sum(d.sum() for d in out.pyramid.left + out.pyramid.right)
    total.backward()
    dead = [n for n, p in net.named_parameters() if p.grad is None or p.grad.abs().sum() == 0]
    assert dead == []


def test_seg_only_loss_leaves_disparity_heads_without_gradient():
    torch.manual_seed(0)
    net = build(tiny_config())
    out = net(torch.rand(2, 3, 64, 64))
    labels = torch.randint(0, 5, (2, 64, 64))
    sum(seg_loss(labels, s) for s in out.seg_heads).backward()
    for p in net.disp_heads.parameters():
        assert p.grad is None or torch.all(p.grad == 0)


def test_attached_feedback_does_reach_disparity_heads():
    torch.manual_seed(0)
    net = build(tiny_config(detach_feedback=False))
    out = net(torch.rand(1, 3, 64, 64))
    seg_loss(torch.randint(0, 5, (1, 64, 64)), out.seg_heads[3]).backward()
    assert net.disp_heads["3"].weight.grad.abs().sum() > 0


def test_inference_helpers_restore_mode(tiny):
    tiny.train()
    x = torch.rand(2, 3, 64, 64)
    mask = infer_segmentation(tiny, x)
    disp = infer_depth(tiny, x)
    assert tiny.training
    assert mask.shape == (2, 64, 64) and mask.dtype == torch.long
    assert int(mask.min()) >= 0 and int(mask.max()) <= 4
    assert disp.shape == (2, 1, 64, 64)


def test_reset_decoder_keeps_encoder(tiny):
    net = build(tiny_config())
    enc = {k: v.clone() for k, v in net.encoder.state_dict().items()}
    head = net.disp_heads["0"].weight.clone()
    net.reset_decoder_and_heads()
    assert all(torch.equal(enc[k], v) for k, v in net.encoder.state_dict().items())
    assert not torch.equal(head, net.disp_heads["0"].weight)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 3), st.sampled_from([16, 32, 48]), st.floats(0.1, 0.5))
def test_pyramid_shape_property(n, size, d_max):
    net = DepthSegNet(ModelConfig(input_size=(size, size), encoder_kind="tiny", base_channels=2, d_max=d_max)).eval()
    with torch.no_grad():
        out = net(torch.rand(n, 3, size, size))
    for i in range(4):
        assert out.pyramid.right[i].shape == (n, 1, size >> i, size >> i)
        assert float(out.pyramid.right[i].max()) < d_max


def test_parameter_count_stable_across_builds():
    counts = []
    for _ in range(2):
        torch.manual_seed(5)
        counts.append(sum(p.numel() for p in build(tiny_config()).parameters()))
    assert counts[0] == counts[1]


class _FixedHeads(torch.nn.Module):
    """Stands in for the network with a fixed last segmentation head."""

    def __init__(self, probs):
        super().__init__()
        self.probs = probs

    def forward(self, image, with_seg=True):
        from depthreg.model import ModelOutput

        return ModelOutput(seg_heads=[self.probs] * 4, pyramid=None)


def test_argmax_picks_femur():
    probs = torch.tensor([0.1, 0.6, 0.1, 0.1, 0.1]).view(1, 5, 1, 1)
    assert infer_segmentation(_FixedHeads(probs), torch.zeros(1, 3, 1, 1)).item() == 1


def test_tie_goes_to_lowest_index():
    probs = torch.tensor([0.4, 0.4, 0.1, 0.05, 0.05]).view(1, 5, 1, 1)
    assert infer_segmentation(_FixedHeads(probs), torch.zeros(1, 3, 1, 1)).item() == 0


def test_inference_consistent_with_forward(tiny):
    x = torch.rand(2, 3, 64, 64)
    tiny.eval()
    with torch.no_grad():
        out = tiny(x)
    assert torch.equal(infer_segmentation(tiny, x), out.seg_heads[3].argmax(1))
    disp = infer_depth(tiny, x)
    assert torch.equal(disp, out.pyramid.left[0])
    assert disp.min() > 0 and disp.max() < tiny.config.d_max
