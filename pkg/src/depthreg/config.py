"""Run configuration: dataclasses plus a sectioned ``key = value`` file format.

Example::

    [run]
    stage = pretrain
    epochs = 200
    [model]
    encoder_kind = tiny
    input_size = 64, 64
    [data]
    pre = data/clean

Top-level fields live in ``[run]``; every nested dataclass has its own section.
Unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, is_dataclass, replace

from depthreg.data import SegAugConfig
from depthreg.losses import DepthLossWeights, SegLossWeights
from depthreg.model import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataPaths:
    pre: str = ""
    dep: str = ""
    seg: str = ""
    train_split: str = "train"
    test_split: str = "test"


@dataclass
class RunConfig:
    stage: str = "pretrain"
    epochs: int = 200
    batch_size: int = 32
    lr_initial: float = 1e-4
    lr_schedule: str = "step_halving"
    lr_milestones: tuple = (80, 120)
    poly_gamma: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    depth_weight: float = 1.0
    seg_weight: float = 1.0
    grad_clip: float = 0.0
    augment: bool = True
    num_workers: int = 0
    checkpoint_every: int = 10
    init_checkpoint: str = ""
    exclude_groups: tuple = ()
    data: DataPaths = field(default_factory=DataPaths)
    model: ModelConfig = field(default_factory=ModelConfig)
    depth_loss: DepthLossWeights = field(default_factory=DepthLossWeights)
    seg_loss: SegLossWeights = field(default_factory=SegLossWeights)
    seg_augment: SegAugConfig = field(default_factory=SegAugConfig)

    @classmethod
    def defaults(cls, stage: str) -> "RunConfig":
        if stage == "pretrain":
            return cls(stage="pretrain", epochs=200, batch_size=32, lr_initial=1e-4,
                       lr_schedule="step_halving", lr_milestones=(80, 120), weight_decay=0.0)
        if stage == "finetune":
            return cls(stage="finetune", epochs=120, batch_size=12, lr_initial=1e-4,
                       lr_schedule="polynomial", poly_gamma=0.9, weight_decay=1e-5)
        raise ConfigError(f"unknown stage {stage!r}")

    def validate(self) -> None:
        if self.stage not in ("pretrain", "finetune"):
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.lr_schedule not in ("step_halving", "polynomial"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.lr_initial <= 0:
            raise ConfigError("epochs, batch_size and lr_initial must be positive")
        if not 0 <= self.depth_loss.gamma <= 1:
            raise ConfigError("depth_loss.gamma must lie in [0, 1]")
        self.model.validate()


SECTIONS = {"data", "model", "depth_loss", "seg_loss", "seg_augment"}


def _parse_value(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            return tuple(int(s) if s.lstrip("-").isdigit() else s for s in items)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def _format_value(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    return str(v)


def set_key(cfg: RunConfig, dotted: str, raw: str) -> RunConfig:
    """Return a copy of ``cfg`` with ``section.key`` (or ``key`` for ``[run]``) set from text."""
    parts = dotted.strip().split(".")
    if parts[0] == "run":
        parts = parts[1:]
    if len(parts) == 1:
        key = parts[0]
        names = {f.name for f in fields(cfg) if f.name not in SECTIONS}
        if key not in names:
            raise ConfigError(f"unknown key {dotted!r}")
        return replace(cfg, **{key: _parse_value(raw, getattr(cfg, key), dotted)})
    if len(parts) == 2 and parts[0] in SECTIONS:
        sec, key = parts
        sub = getattr(cfg, sec)
        if key not in {f.name for f in fields(sub)}:
            raise ConfigError(f"unknown key {dotted!r}")
        return replace(cfg, **{sec: replace(sub, **{key: _parse_value(raw, getattr(sub, key), dotted)})})
    raise ConfigError(f"unknown key {dotted!r}")


def loads(text: str, base: RunConfig | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    stage = parser.get("run", "stage", fallback=None) if parser.has_section("run") else None
    cfg = base or RunConfig.defaults(stage or "pretrain")
    for sec in parser.sections():
        if sec != "run" and sec not in SECTIONS:
            raise ConfigError(f"unknown section [{sec}]")
        for key, raw in parser.items(sec):
            cfg = set_key(cfg, key if sec == "run" else f"{sec}.{key}", raw)
    return cfg


def load(path) -> RunConfig:
    with open(path) as fh:
        return loads(fh.read())


def dumps(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser["run"] = {f.name: _format_value(getattr(cfg, f.name)) for f in fields(cfg) if f.name not in SECTIONS}
    for sec in sorted(SECTIONS):
        sub = getattr(cfg, sec)
        assert is_dataclass(sub)
        parser[sec] = {f.name: _format_value(getattr(sub, f.name)) for f in fields(sub)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
