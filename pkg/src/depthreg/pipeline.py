"""Two-stage training: depth pre-training, then joint segmentation + depth fine-tuning."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from functools import partial
from pathlib import Path

import numpy as np
import torch

from depthreg import config as cfgmod
from depthreg import data
from depthreg.config import RunConfig
from depthreg.losses import average_seg_heads, depth_loss_terms, seg_loss
from depthreg.model import DepthSegNet, ModelConfig, build

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """Non-finite loss; carries the offending batch ids and per-term values."""

    def __init__(self, step: int, ids: list[str], terms: dict[str, float]):
        self.step, self.ids, self.terms = step, ids, terms
        super().__init__(f"non-finite loss at step {step}: terms={terms} batch={ids}")


class CheckpointError(ValueError):
    pass


def lr_step_halving(lr0: float, milestones, epoch: int) -> float:
    return lr0 * 0.5 ** sum(1 for m in milestones if epoch >= m)


def lr_polynomial(lr0: float, t: int, total: int, gamma: float = 0.9) -> float:
    return lr0 * (1.0 - t / total) ** gamma


def learning_rate(cfg: RunConfig, epoch: int, step: int, total_steps: int) -> float:
    if cfg.lr_schedule == "step_halving":
        return lr_step_halving(cfg.lr_initial, cfg.lr_milestones, epoch)
    return lr_polynomial(cfg.lr_initial, step, total_steps, cfg.poly_gamma)


@dataclass
class TrainState:
    model: DepthSegNet
    optimizer: torch.optim.Optimizer
    epoch: int = 0
    global_step: int = 0
    step_in_epoch: int = 0
    best_metric: float | None = None
    loss_log: list[dict] = field(default_factory=list)


def _atomic_torch_save(obj, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        torch.save(obj, fh)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def _model_config_from(d: dict) -> ModelConfig:
    d = dict(d)
    d["input_size"] = tuple(d["input_size"])
    return ModelConfig(**d)


def load_checkpoint(path) -> dict:
    try:
        ckpt = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # torch raises a zoo of types for corrupt files
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(ckpt, dict) or "format_version" not in ckpt:
        raise CheckpointError(f"{path} is not a checkpoint")
    if ckpt["format_version"] != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format_version {ckpt['format_version']!r}")
    return ckpt


def load_model(path) -> DepthSegNet:
    ckpt = load_checkpoint(path)
    model = build(_model_config_from(ckpt["model_config"]))
    model.load_state_dict(ckpt["model"])
    model.eval()
    return model


class Trainer:
    """Owns the model, optimizer and data streams for one training stage."""

    def __init__(self, cfg: RunConfig, out_dir=None, init_model: bool = True):
        cfg.validate()
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir else None
        torch.manual_seed(cfg.seed)
        model = build(cfg.model)
        if cfg.stage == "finetune" and cfg.init_checkpoint and init_model:
            self._load_pretrained_encoder(model, cfg.init_checkpoint)
        params = [p for n, p in model.named_parameters() if cfg.stage == "finetune" or not n.startswith("seg_heads.")]
        opt = torch.optim.Adam(params, lr=cfg.lr_initial, weight_decay=cfg.weight_decay)
        self.state = TrainState(model=model, optimizer=opt)

        self.seg_records = self.dep_records = []
        self.seg_manifest = self.dep_manifest = None
        if cfg.stage == "pretrain":
            self.dep_manifest = data.load_manifest(cfg.data.pre)
        else:
            self.dep_manifest = data.load_manifest(cfg.data.dep or cfg.data.seg)
            self.seg_manifest = data.load_manifest(cfg.data.seg or cfg.data.dep)
            self.seg_records = self.seg_manifest.select("seg", cfg.data.train_split or None,
                                                        exclude_groups=cfg.exclude_groups or None)
            if not self.seg_records:
                raise data.DatasetError(["segmentation training set is empty"])
        if cfg.stage == "pretrain" or cfg.depth_weight > 0:
            self.dep_records = self.dep_manifest.select("stereo", cfg.data.train_split or None,
                                                        exclude_groups=cfg.exclude_groups or None)
            if not self.dep_records:
                raise data.DatasetError(["stereo training set is empty"])
        self._pool = None

    # -- setup -------------------------------------------------------------

    @staticmethod
    def _load_pretrained_encoder(model: DepthSegNet, path) -> None:
        ckpt = load_checkpoint(path)
        src = _model_config_from(ckpt["model_config"])
        dst = model.config
        for key in ("encoder_kind", "base_channels"):
            if getattr(src, key) != getattr(dst, key):
                raise CheckpointError(f"checkpoint {key}={getattr(src, key)!r} does not match config {getattr(dst, key)!r}")
        enc = {k[len("encoder."):]: v for k, v in ckpt["model"].items() if k.startswith("encoder.")}
        model.encoder.load_state_dict(enc)

    @property
    def model(self) -> DepthSegNet:
        return self.state.model

    def steps_per_epoch(self) -> int:
        bs = self.cfg.batch_size
        n = [math.ceil(len(r) / bs) for r in (self.seg_records, self.dep_records) if r]
        return max(n)

    def total_steps(self) -> int:
        return self.cfg.epochs * self.steps_per_epoch()

    def _augment(self, kind: str):
        if not self.cfg.augment:
            return None
        if kind == "stereo":
            return data.augment_depth
        return partial(data.augment_seg, cfg=self.cfg.seg_augment)

    def epoch_batches(self, epoch: int, k: int) -> dict:
        """The ``k``-th step's batches of ``epoch``; the shorter stream cycles."""
        out = {}
        seed = self.cfg.seed
        for kind, records, manifest, stream_seed in (("seg", self.seg_records, self.seg_manifest, seed),
                                                     ("stereo", self.dep_records, self.dep_manifest, seed + 1)):
            if not records:
                continue
            order = data.batch_order(len(records), self.cfg.batch_size, stream_seed, epoch)
            chunk = order[k % len(order)]
            out[kind] = data.make_batch(manifest, kind, records, chunk, stream_seed, epoch,
                                        self._augment(kind), self._pool)
        return out

    # -- losses ------------------------------------------------------------

    def compute_losses(self, batches: dict) -> dict[str, torch.Tensor]:
        cfg = self.cfg
        model = self.model
        terms: dict[str, torch.Tensor] = {}
        total = 0.0
        if "stereo" in batches:
            b = batches["stereo"]
            out = model(b["left"], with_seg=False)
            t = depth_loss_terms(b["left"], b["right"], out.pyramid, cfg.depth_loss)
            w = cfg.depth_loss
            terms["depth_ap"], terms["depth_lr"], terms["depth_ds"] = t["ap"], t["lr"], t["ds"]
            terms["depth"] = w.alpha_ap * t["ap"] + w.alpha_lr * t["lr"] + w.alpha_ds * t["ds"]
            total = total + (cfg.depth_weight if cfg.stage == "finetune" else 1.0) * terms["depth"]
        if "seg" in batches:
            b = batches["seg"]
            out = model(b["image"], with_seg=True)
            terms["seg"] = seg_loss(b["mask"], average_seg_heads(out.seg_heads), cfg.seg_loss)
            total = total + cfg.seg_weight * terms["seg"]
        terms["total"] = total
        return terms

    # -- loop --------------------------------------------------------------

    def train_step(self, batches: dict) -> dict[str, float]:
        st = self.state
        lr = learning_rate(self.cfg, st.epoch, st.global_step, self.total_steps())
        for g in st.optimizer.param_groups:
            g["lr"] = lr
        self.model.train()
        terms = self.compute_losses(batches)
        values = {k: float(v.detach()) for k, v in terms.items()}
        if not all(math.isfinite(v) for v in values.values()):
            ids = [i for b in batches.values() for i in b["ids"]]
            raise TrainingDiverged(st.global_step, ids, values)
        st.optimizer.zero_grad(set_to_none=True)
        terms["total"].backward()
        if self.cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.grad_clip)
        st.optimizer.step()
        rec = {"type": "step", "step": st.global_step, "epoch": st.epoch, "lr": lr, **values}
        st.loss_log.append(rec)
        self._log(rec)
        st.global_step += 1
        st.step_in_epoch += 1
        return values

    def _log(self, rec: dict) -> None:
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        with open(self.out_dir / "metrics.jsonl", "a") as fh:
            fh.write(json.dumps(rec) + "\n")

    def run(self, max_steps: int | None = None) -> TrainState:
        """Train until ``cfg.epochs`` are done (or ``max_steps`` more steps)."""
        st = self.state
        spe = self.steps_per_epoch()
        budget = max_steps if max_steps is not None else float("inf")
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            (self.out_dir / "config.ini").write_text(cfgmod.dumps(self.cfg))
        self._pool = data.ThreadPoolExecutor(self.cfg.num_workers) if self.cfg.num_workers > 0 else None
        try:
            while st.epoch < self.cfg.epochs and budget > 0:
                epoch_vals = []
                while st.step_in_epoch < spe and budget > 0:
                    epoch_vals.append(self.train_step(self.epoch_batches(st.epoch, st.step_in_epoch)))
                    budget -= 1
                if st.step_in_epoch < spe:
                    break
                if epoch_vals:
                    mean = {k: float(np.mean([v[k] for v in epoch_vals])) for k in epoch_vals[0]}
                    self._log({"type": "epoch", "epoch": st.epoch, **mean})
                    log.info("epoch %d: %s", st.epoch, mean)
                st.epoch += 1
                st.step_in_epoch = 0
                if self.out_dir is not None and (st.epoch % self.cfg.checkpoint_every == 0 or st.epoch == self.cfg.epochs):
                    self.save(self.out_dir / f"ckpt_epoch{st.epoch:04d}.pt")
        finally:
            if self._pool:
                self._pool.shutdown()
            self._pool = None
        if self.out_dir is not None:
            # also when stopped by max_steps mid-epoch, so last.pt is always the returned state
            self.save(self.out_dir / "last.pt")
        return st

    # -- persistence -------------------------------------------------------

    def save(self, path) -> None:
        st = self.state
        _atomic_torch_save({
            "format_version": FORMAT_VERSION,
            "model_config": asdict(self.cfg.model),
            "config_text": cfgmod.dumps(self.cfg),
            "model": st.model.state_dict(),
            "optimizer": st.optimizer.state_dict(),
            "epoch": st.epoch,
            "global_step": st.global_step,
            "step_in_epoch": st.step_in_epoch,
            "best_metric": st.best_metric,
            "seed": self.cfg.seed,
            "torch_rng": torch.get_rng_state(),
            "loss_log": st.loss_log,
        }, path)

    @classmethod
    def resume(cls, path, cfg: RunConfig | None = None, out_dir=None) -> "Trainer":
        ckpt = load_checkpoint(path)
        saved = cfgmod.loads(ckpt["config_text"])
        if cfg is not None and asdict(cfg.model) != asdict(saved.model):
            raise CheckpointError("model config differs from the checkpoint's")
        trainer = cls(cfg or saved, out_dir=out_dir, init_model=False)
        st = trainer.state
        try:
            st.model.load_state_dict(ckpt["model"])
            st.optimizer.load_state_dict(ckpt["optimizer"])
        except (RuntimeError, ValueError, KeyError) as exc:
            raise CheckpointError(f"corrupt checkpoint blob: {exc}") from exc
        st.epoch, st.global_step = ckpt["epoch"], ckpt["global_step"]
        st.step_in_epoch, st.best_metric = ckpt["step_in_epoch"], ckpt["best_metric"]
        st.loss_log = list(ckpt["loss_log"])
        torch.set_rng_state(ckpt["torch_rng"])
        return trainer


def pretrain(cfg: RunConfig, out_dir=None, max_steps: int | None = None) -> Trainer:
    if cfg.stage != "pretrain":
        raise cfgmod.ConfigError("pretrain() needs stage = pretrain")
    trainer = Trainer(cfg, out_dir)
    trainer.run(max_steps)
    return trainer


def finetune(cfg: RunConfig, out_dir=None, max_steps: int | None = None) -> Trainer:
    if cfg.stage != "finetune":
        raise cfgmod.ConfigError("finetune() needs stage = finetune")
    trainer = Trainer(cfg, out_dir)
    trainer.run(max_steps)
    return trainer
