"""Desk-scale experiment recipes shared by ``scripts/`` and the acceptance suite.

Each recipe is a frozen dataclass of settings plus a function that renders its
synthetic data, trains, and returns a plain dict of results. Thresholds live
next to the settings they were calibrated with.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from depthreg import evaluation, pipeline
from depthreg.config import RunConfig
from depthreg.model import ModelConfig
from depthreg.synthgen import emit_dataset, random_scene

log = logging.getLogger(__name__)


def synthetic_split(root, n_train: int, n_test: int, size: int, seed: int, groups: int = 5):
    """Render ``n_train + n_test`` random scenes with an exact train/test split."""
    rng = np.random.default_rng(seed)
    n = n_train + n_test
    specs = [random_scene(rng, (size, size), group=f"g{i % groups}") for i in range(n)]
    return emit_dataset(specs, root, (n_train / n, n_test / n), seed=seed)


def _tiny(size: int, base: int) -> ModelConfig:
    return ModelConfig(input_size=(size, size), encoder_kind="tiny", base_channels=base)


# --------------------------------------------------------------------------- overfit

@dataclass(frozen=True)
class OverfitSettings:
    samples: int = 2
    size: int = 64
    base_channels: int = 16
    steps: int = 500
    lr: float = 2e-3
    seed: int = 1
    required_reduction: float = 0.95


def run_overfit(s: OverfitSettings, root) -> dict:
    """Joint fine-tuning loss on a fixed batch of ``s.samples`` labeled stereo scenes."""
    root = Path(root)
    rng = np.random.default_rng(s.seed)
    emit_dataset([random_scene(rng, (s.size, s.size), group="g0") for _ in range(s.samples)], root / "data",
                 (1.0, 0.0))
    cfg = RunConfig.defaults("finetune")
    cfg.model = _tiny(s.size, s.base_channels)
    cfg.data.seg = str(root / "data")
    cfg.batch_size, cfg.epochs, cfg.lr_initial = s.samples, s.steps, s.lr
    cfg.lr_schedule, cfg.lr_milestones, cfg.weight_decay, cfg.augment = "step_halving", (), 0.0, False
    t0 = time.perf_counter()
    trainer = pipeline.finetune(cfg)
    totals = [r["total"] for r in trainer.state.loss_log]
    return {"steps": len(totals), "initial": totals[0], "final": totals[-1],
            "reduction": 1.0 - totals[-1] / totals[0], "seconds": time.perf_counter() - t0,
            "last": trainer.state.loss_log[-1], "curve": totals}


# --------------------------------------------------------------------------- depth accuracy

@dataclass(frozen=True)
class DepthAccuracySettings:
    train_scenes: int = 200
    test_scenes: int = 20
    size: int = 64
    base_channels: int = 8
    batch_size: int = 8
    epochs: int = 30
    lr: float = 1e-3
    augment: bool = True
    seed: int = 0
    threshold: float = 0.15   # mean MAE / true disparity range, frozen after calibration


def depth_run_config(s: DepthAccuracySettings, data_root) -> RunConfig:
    cfg = RunConfig.defaults("pretrain")
    cfg.model = _tiny(s.size, s.base_channels)
    cfg.data.pre = str(data_root)
    cfg.batch_size, cfg.epochs, cfg.lr_initial, cfg.augment, cfg.seed = s.batch_size, s.epochs, s.lr, s.augment, s.seed
    # halve at the same fractions of the run as the 80/120-of-200 schedule
    cfg.lr_milestones = (round(0.4 * s.epochs), round(0.6 * s.epochs))
    cfg.checkpoint_every = s.epochs
    return cfg


def run_depth_accuracy(s: DepthAccuracySettings, root, eval_every: int = 0, data_root=None) -> dict:
    """Pretrain on synthetic pairs, then score disparity on held-out scenes.

    With ``eval_every > 0`` the held-out score is also recorded every that
    many epochs (for calibration curves).
    """
    root = Path(root)
    data_root = Path(data_root) if data_root else root / "data"
    manifest = synthetic_split(data_root, s.train_scenes, s.test_scenes, s.size, s.seed)
    cfg = depth_run_config(s, data_root)
    trainer = pipeline.Trainer(cfg, root / "pretrain")
    spe = trainer.steps_per_epoch()
    history = []
    t0 = time.perf_counter()
    chunk = eval_every if eval_every > 0 else s.epochs
    while trainer.state.epoch < s.epochs:
        trainer.run(max_steps=min(chunk, s.epochs - trainer.state.epoch) * spe)
        rows = evaluation.evaluate_depth(trainer.model, manifest, "test")
        score = float(np.mean([r["mae_over_range"] for r in rows]))
        history.append({"epoch": trainer.state.epoch, "mae_over_range": score,
                        "mae_px": float(np.mean([r["mae_px"] for r in rows])),
                        "seconds": time.perf_counter() - t0})
        log.info("depth accuracy after epoch %d: %.4f", trainer.state.epoch, score)
    ckpt = root / "pretrain" / "last.pt"
    trainer.save(ckpt)
    return {"rows": rows, "mean_mae_over_range": history[-1]["mae_over_range"], "history": history,
            "seconds": time.perf_counter() - t0, "checkpoint": str(ckpt), "data_root": str(data_root)}


# --------------------------------------------------------------------------- MTL comparison

@dataclass(frozen=True)
class ComparisonSettings:
    # fine-tuning pools drawn from the train split: a labeled set and a disjoint,
    # half-sized stereo set, mirroring the full-scale 3868-image / 2000-pair ratio
    labeled_scenes: int = 80
    stereo_scenes: int = 40
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    seeds: tuple = (0, 1, 2)
    depth_weight: float = 1.0
    margin: float = 0.02


def comparison_run_config(s: ComparisonSettings, depth: DepthAccuracySettings, data_root, init_checkpoint) -> RunConfig:
    """Fine-tuning recipe (polynomial decay, weight decay) at desk scale."""
    cfg = RunConfig.defaults("finetune")
    cfg.model = _tiny(depth.size, depth.base_channels)
    cfg.data.seg = cfg.data.dep = str(data_root)
    cfg.init_checkpoint = str(init_checkpoint)
    cfg.batch_size, cfg.lr_initial, cfg.depth_weight, cfg.epochs = s.batch_size, s.lr, s.depth_weight, s.epochs
    return cfg


def comparison_view(s: ComparisonSettings, data_root, view_root):
    """Dataset view whose train split holds ``labeled_scenes`` seg records and
    ``stereo_scenes`` stereo records from other scenes; the test split is untouched."""
    from depthreg import data

    full = data.load_manifest(data_root)
    scenes = [r["id"].split("/", 1)[1] for r in full.select("seg", "train")]
    if len(scenes) < s.labeled_scenes + s.stereo_scenes:
        raise ValueError(f"train split has {len(scenes)} scenes, need {s.labeled_scenes + s.stereo_scenes}")
    keep = {("seg", x) for x in scenes[: s.labeled_scenes]}
    keep |= {("stereo", x) for x in scenes[s.labeled_scenes: s.labeled_scenes + s.stereo_scenes]}
    records = [r if r["split"] != "train" or (r["kind"], r["id"].split("/", 1)[1]) in keep else dict(r, split="unused")
               for r in full.records]
    view_root = Path(view_root)
    view_root.mkdir(parents=True, exist_ok=True)
    return _link_view(Path(data_root), view_root, records)


def run_comparison(s: ComparisonSettings, depth: DepthAccuracySettings, root, data_root, init_checkpoint) -> dict:
    """Joint model vs ``depth_weight = 0`` ablation on the held-out synthetic split."""
    root = Path(root)
    comparison_view(s, data_root, root / "view")
    cfg = comparison_run_config(s, depth, root / "view", init_checkpoint)
    t0 = time.perf_counter()
    joint, ablation, result = evaluation.compare_arms(cfg, list(s.seeds), root / "runs")
    evaluation.emit_report([joint, ablation], root / "dice")
    evaluation.emit_report(result, root / "comparison")
    return {"joint": joint.grand_mean, "seg_only": ablation.grand_mean,
            "joint_folds": joint.fold_means(), "seg_only_folds": ablation.fold_means(),
            "p_value": result.p_value, "statistic": result.statistic, "n": result.n, "direction": result.direction,
            "seconds": time.perf_counter() - t0, "table": str(root / "dice.jsonl")}


def _link_view(src: Path, dst: Path, records: list[dict]):
    """Expose ``src``'s files under ``dst`` with a rewritten manifest."""
    from depthreg.data import write_manifest

    for sub in ("stereo", "seg"):
        link = dst / sub
        if not link.exists():
            link.symlink_to((src / sub).resolve(), target_is_directory=True)
    return write_manifest(dst, records)


__all__ = [
    "ComparisonSettings", "DepthAccuracySettings", "OverfitSettings", "comparison_run_config", "comparison_view",
    "depth_run_config", "run_comparison", "run_depth_accuracy", "run_overfit", "synthetic_split",
]
