"""Dice, leave-one-out cross-validation, Wilcoxon signed-rank and report output.

Empty-mask convention for Dice: 1.0 when prediction and annotation are both
empty for a class, 0.0 when exactly one is. Report grand means are the mean
over per-(fold, class) cells; the grand sd is the population sd of those cells.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from depthreg import data
from depthreg.types import CLASS_NAMES, FOREGROUND_CLASSES, ContractViolation

EMPTY_MASK_NOTE = "Dice convention: 1.0 if prediction and annotation are both empty, 0.0 if exactly one is."
EXACT_MAX_N = 25


def dice(prediction: np.ndarray, annotation: np.ndarray, class_id: int) -> float:
    prediction, annotation = np.asarray(prediction), np.asarray(annotation)
    if prediction.shape != annotation.shape:
        raise ContractViolation(f"shape mismatch: {prediction.shape} vs {annotation.shape}")
    p = prediction == class_id
    g = annotation == class_id
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / total


def per_class_dice(prediction, annotation, classes=FOREGROUND_CLASSES) -> np.ndarray:
    return np.array([dice(prediction, annotation, c) for c in classes])


# --------------------------------------------------------------------------- reports

@dataclass
class DiceReport:
    """Per-(fold, class) Dice summary plus the per-image scores behind it."""

    method: str
    cells: list[dict] = field(default_factory=list)   # fold_id, class, n_images, dice_mean, dice_sd
    per_image: dict[str, list[list[float]]] = field(default_factory=dict)  # fold -> images x classes

    @classmethod
    def from_per_image(cls, method: str, per_image: dict[str, np.ndarray]) -> "DiceReport":
        cells = []
        for fold, scores in per_image.items():
            scores = np.asarray(scores, dtype=float)
            if scores.shape[0] == 0:
                raise ContractViolation(f"fold {fold!r} has no test images")
            for k, c in enumerate(FOREGROUND_CLASSES):
                cells.append({"fold_id": fold, "class": CLASS_NAMES[c], "n_images": int(scores.shape[0]),
                              "dice_mean": float(scores[:, k].mean()), "dice_sd": float(scores[:, k].std())})
        return cls(method, cells, {f: np.asarray(s, dtype=float).tolist() for f, s in per_image.items()})

    @property
    def folds(self) -> list[str]:
        return list(dict.fromkeys(c["fold_id"] for c in self.cells))

    def fold_means(self) -> dict[str, float]:
        return {f: float(np.mean([c["dice_mean"] for c in self.cells if c["fold_id"] == f])) for f in self.folds}

    def class_means(self) -> dict[str, float]:
        names = list(dict.fromkeys(c["class"] for c in self.cells))
        return {n: float(np.mean([c["dice_mean"] for c in self.cells if c["class"] == n])) for n in names}

    def class_sds(self) -> dict[str, float]:
        names = list(dict.fromkeys(c["class"] for c in self.cells))
        return {n: float(np.std([c["dice_mean"] for c in self.cells if c["class"] == n])) for n in names}

    @property
    def grand_mean(self) -> float:
        return float(np.mean([c["dice_mean"] for c in self.cells]))

    @property
    def grand_sd(self) -> float:
        return float(np.std([c["dice_mean"] for c in self.cells]))

    def image_scores(self) -> np.ndarray:
        """Per-image mean foreground Dice, folds concatenated in report order."""
        return np.concatenate([np.asarray(self.per_image[f]).mean(axis=1) for f in self.folds])


@dataclass
class ComparisonResult:
    method_a: str
    method_b: str
    a: list[float]
    b: list[float]
    n: int
    statistic: float
    p_value: float
    direction: str
    degenerate: bool = False


# --------------------------------------------------------------------------- Wilcoxon

def _midranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _exact_null_counts(doubled_ranks: np.ndarray) -> np.ndarray:
    """Number of sign assignments giving each value of 2 * W+ (subset-sum DP)."""
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in doubled_ranks.astype(int):
        counts[r:] = counts[r:] + counts[:-r].copy()
    return counts


def wilcoxon_signed_rank(a, b, method_a: str = "a", method_b: str = "b") -> ComparisonResult:
    """Two-sided paired test on ``a - b``.

    Zero differences are dropped. For ``n <= 25`` remaining pairs the p-value
    comes from the exact permutation distribution of the (mid-)rank sum; above
    that from the normal approximation with tie correction and no continuity
    correction. ``statistic`` is ``min(W+, W-)``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ContractViolation("paired vectors must be 1-D and of equal length")
    if len(a) < 6:
        raise ContractViolation(f"need at least 6 pairs, got {len(a)}")
    d = a - b
    d = d[d != 0]
    n = len(d)
    if n == 0:
        return ComparisonResult(method_a, method_b, a.tolist(), b.tolist(), len(a), 0.0, 1.0, "equal", True)
    ranks = _midranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    direction = "a>b" if w_plus > w_minus else "a<b" if w_plus < w_minus else "equal"
    if n <= EXACT_MAX_N:
        doubled = np.round(2 * ranks).astype(int)
        counts = _exact_null_counts(doubled)
        k = int(round(2 * w_plus))
        lower = sum(counts[: k + 1])
        upper = sum(counts[k:])
        p = min(1.0, 2.0 * float(min(lower, upper)) / float(2 ** n))
    else:
        mean = n * (n + 1) / 4.0
        _, tie_counts = np.unique(np.abs(d), return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_counts ** 3 - tie_counts)) / 48.0
        z = (w_plus - mean) / math.sqrt(var)
        p = min(1.0, math.erfc(abs(z) / math.sqrt(2.0)))
    return ComparisonResult(method_a, method_b, a.tolist(), b.tolist(), n, min(w_plus, w_minus), p, direction)


# --------------------------------------------------------------------------- depth

def depth_accuracy(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray | None = None) -> tuple[float, float]:
    """Mean absolute error in pixels and mean relative error over valid pixels.

    Disparities are in width units; pixels are ``d * W``.
    """
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ContractViolation(f"shape mismatch: {pred.shape} vs {gt.shape}")
    valid = np.ones(gt.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if not valid.any():
        raise ContractViolation("valid mask is empty")
    w = gt.shape[-1]
    err = np.abs(pred - gt)[valid]
    return float(err.mean() * w), float((err / np.abs(gt[valid])).mean())


def evaluate_depth(model, manifest: data.DatasetManifest, split: str | None = "test") -> list[dict]:
    """Per-scene depth accuracy on synthetic records with ground-truth side-cars."""
    from depthreg.model import infer_depth
    from depthreg.synthgen import read_gt_disparity

    rows = []
    for rec in manifest.select("stereo", split):
        if "gtdisp" not in rec["files"]:
            continue
        left = manifest.read(rec["files"]["left"])
        gt = read_gt_disparity(manifest.root / rec["files"]["gtdisp"])
        valid = data.load_mask(manifest.root / rec["files"]["valid"]).astype(bool)
        pred = infer_depth(model, data.to_tensor(left)[None])[0, 0].numpy()
        mae, rel = depth_accuracy(pred, gt, valid)
        rng_px = float((gt[valid].max() - gt[valid].min()) * gt.shape[1])
        rows.append({"id": rec["id"], "mae_px": mae, "rel_err": rel, "range_px": rng_px,
                     "mae_over_range": mae / rng_px if rng_px > 0 else float("inf")})
    return rows


# --------------------------------------------------------------------------- segmentation

def evaluate_segmentation(model, manifest: data.DatasetManifest, split: str | None = None,
                          groups=None, batch_size: int = 16) -> np.ndarray:
    """Per-image foreground Dice (images x 4) from the last segmentation head."""
    from depthreg.model import infer_segmentation

    records = manifest.select("seg", split, groups=groups)
    scores = []
    for i in range(0, len(records), batch_size):
        chunk = records[i:i + batch_size]
        imgs = torch.stack([data.to_tensor(manifest.read(r["files"]["image"])) for r in chunk])
        preds = infer_segmentation(model, imgs).numpy()
        for rec, pred in zip(chunk, preds):
            scores.append(per_class_dice(pred, manifest.read(rec["files"]["mask"], "mask")))
    return np.asarray(scores).reshape(-1, len(FOREGROUND_CLASSES))


def fold_seed(master_seed: int, fold_id: str) -> int:
    """Seed for a fold, derived from the fold id so evaluation order does not matter."""
    return int(np.random.SeedSequence([master_seed, zlib.crc32(fold_id.encode())]).generate_state(1)[0] % (2 ** 31))


def loocv(run_template, folds: list[str], out_dir=None, method: str = "joint", max_steps: int | None = None) -> DiceReport:
    """Leave-one-group-out: train on every other group, score the held-out one."""
    from depthreg.pipeline import finetune

    if len(folds) < 2:
        raise ContractViolation("leave-one-out needs at least 2 groups")
    manifest = data.load_manifest(run_template.data.seg or run_template.data.dep)
    per_image = {}
    for fold in folds:
        if not manifest.select("seg", None, groups=[fold]):
            raise ContractViolation(f"fold {fold!r} has no test images")
        cfg = replace(run_template, seed=fold_seed(run_template.seed, fold), exclude_groups=(fold,),
                      data=replace(run_template.data, train_split=""))
        fold_dir = Path(out_dir) / f"fold_{fold}" if out_dir else None
        trainer = finetune(cfg, fold_dir, max_steps=max_steps)
        if fold_dir is not None and not (fold_dir / "last.pt").exists():
            trainer.save(fold_dir / "last.pt")
        per_image[fold] = evaluate_segmentation(trainer.model, manifest, None, groups=[fold])
    return DiceReport.from_per_image(method, per_image)


# --------------------------------------------------------------------------- output

def write_jsonl(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def report_rows(report: DiceReport) -> list[dict]:
    return [{"method": report.method, **c} for c in report.cells]


def comparison_row(res: ComparisonResult) -> dict:
    return {"method_a": res.method_a, "method_b": res.method_b, "n": res.n, "statistic": res.statistic,
            "p_value": res.p_value, "direction": res.direction}


def _chart(reports: list[DiceReport], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(11, 4), gridspec_kw={"width_ratios": [len(reports[0].folds) + 1, 5]})
    width = 0.8 / len(reports)
    for k, rep in enumerate(reports):
        fm = rep.fold_means()
        fsd = {f: float(np.std([c["dice_mean"] for c in rep.cells if c["fold_id"] == f])) for f in rep.folds}
        xs = np.arange(len(rep.folds))
        axes[0].bar(xs + k * width, [fm[f] for f in rep.folds], width, yerr=[fsd[f] for f in rep.folds],
                    label=rep.method, capsize=2)
        cm, csd = rep.class_means(), rep.class_sds()
        names = list(cm) + ["Mean"]
        xs = np.arange(len(names))
        axes[1].bar(xs + k * width, list(cm.values()) + [rep.grand_mean], width,
                    yerr=list(csd.values()) + [rep.grand_sd], label=rep.method, capsize=2)
    axes[0].set_xticks(np.arange(len(reports[0].folds)) + width * (len(reports) - 1) / 2, reports[0].folds)
    axes[0].set_title("Dice per test set")
    axes[1].set_xticks(np.arange(len(names)) + width * (len(reports) - 1) / 2, names)
    axes[1].set_title("Dice per anatomy")
    for ax in axes:
        ax.set_ylim(0, 1)
        ax.legend(fontsize=8)
    fig.text(0.01, 0.01, EMPTY_MASK_NOTE, fontsize=7)
    fig.tight_layout(rect=(0, 0.04, 1, 1))
    fig.savefig(path, dpi=80)
    plt.close(fig)


def emit_report(report, path) -> list[Path]:
    """Write a table (``<path>.jsonl``) and, for Dice reports, a bar chart (``<path>.png``).

    ``report`` may be a :class:`DiceReport`, a list of them (bars side by side),
    or a :class:`ComparisonResult`.
    """
    path = Path(path)
    if isinstance(report, ComparisonResult):
        table = path.with_suffix(".jsonl")
        write_jsonl(table, [comparison_row(report)])
        return [table]
    reports = report if isinstance(report, (list, tuple)) else [report]
    table = path.with_suffix(".jsonl")
    write_jsonl(table, [row for r in reports for row in report_rows(r)])
    summary = path.with_name(path.stem + "_summary.json")
    summary.write_text(json.dumps({
        "note": EMPTY_MASK_NOTE,
        "methods": {r.method: {"grand_mean": r.grand_mean, "grand_sd": r.grand_sd,
                               "fold_means": r.fold_means(), "class_means": r.class_means()} for r in reports},
    }, indent=1))
    chart = path.with_suffix(".png")
    _chart(list(reports), chart)
    return [table, summary, chart]


def report_from_rows(rows: list[dict]) -> dict[str, DiceReport]:
    out: dict[str, DiceReport] = {}
    for row in rows:
        row = dict(row)
        method = row.pop("method")
        out.setdefault(method, DiceReport(method)).cells.append(row)
    return out


def compare_arms(cfg, seeds, out_dir=None, max_steps: int | None = None, ablation_keeps_init: bool = False):
    """Train the joint model and the ``depth_weight = 0`` ablation per seed.

    By default the ablation also drops ``init_checkpoint`` so it is a plain
    segmentation network with no depth signal at all; ``ablation_keeps_init``
    isolates the fine-tuning term alone. Both arms are scored on ``cfg.data.test_split``; returns the two
    reports (one "fold" per seed) and a Wilcoxon test on paired per-image
    scores.
    """
    from depthreg.pipeline import finetune

    manifest = data.load_manifest(cfg.data.seg or cfg.data.dep)
    ablation_init = cfg.init_checkpoint if ablation_keeps_init else ""
    arms = {"joint": cfg, "seg_only": replace(cfg, depth_weight=0.0, init_checkpoint=ablation_init)}
    per_image: dict[str, dict[str, np.ndarray]] = {name: {} for name in arms}
    for seed in seeds:
        for name, arm in arms.items():
            run_dir = Path(out_dir) / f"{name}_seed{seed}" if out_dir else None
            trainer = finetune(replace(arm, seed=seed), run_dir, max_steps=max_steps)
            per_image[name][f"seed{seed}"] = evaluate_segmentation(trainer.model, manifest, cfg.data.test_split)
    joint = DiceReport.from_per_image("joint", per_image["joint"])
    ablation = DiceReport.from_per_image("seg_only", per_image["seg_only"])
    result = wilcoxon_signed_rank(joint.image_scores(), ablation.image_scores(), "joint", "seg_only")
    return joint, ablation, result


__all__ = [
    "ComparisonResult", "DiceReport", "compare_arms", "depth_accuracy", "dice", "emit_report", "evaluate_depth",
    "evaluate_segmentation", "fold_seed", "loocv", "per_class_dice", "read_jsonl", "report_from_rows",
    "wilcoxon_signed_rank", "write_jsonl",
]
