import numpy as np
import pytest
import torch

from depthreg.model import ModelConfig


def nchw(img: np.ndarray) -> torch.Tensor:
    """(H, W, C) or (H, W) array to a (1, C, H, W) float64 tensor."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    return torch.from_numpy(img).permute(2, 0, 1)[None].contiguous()


def tiny_config(size=64, base=8, **kw) -> ModelConfig:
    return ModelConfig(input_size=(size, size), encoder_kind="tiny", base_channels=base, **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Ten synthetic 64x64 scenes in two groups, 80/20 split."""
    from depthreg.synthgen import emit_dataset, random_scene

    root = tmp_path_factory.mktemp("small_ds")
    r = np.random.default_rng(7)
    specs = [random_scene(r, (64, 64), group=f"g{i % 2}") for i in range(10)]
    return emit_dataset(specs, root, (0.8, 0.2), seed=3)


_CRITERIA = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line; it is printed now and again in the terminal summary."""
    lines = request.config.stash.setdefault(_CRITERIA, [])

    def record(number: int, passed: bool, detail: str, status: str | None = None) -> bool:
        line = f"{status or ('PASS' if passed else 'FAIL')}  criterion {number:>2}: {detail}"
        lines.append((number, line))
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines, key=lambda t: t[0]):
            terminalreporter.write_line(line)
