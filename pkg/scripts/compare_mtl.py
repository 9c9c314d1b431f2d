#!/usr/bin/env python3
"""Joint fine-tuning vs segmentation-only ablation on synthetic scenes.

Fine-tunes the joint model (segmentation + depth losses, encoder from a depth
pretrain checkpoint) and the ``depth_weight = 0`` ablation for several seeds,
scores per-image Dice on the held-out split and runs the paired Wilcoxon test.

Run:
    python3 scripts/calibrate_depth.py --out artifacts/calibrate_depth
    python3 scripts/compare_mtl.py --pretrain artifacts/calibrate_depth

    Without ``--pretrain`` the depth pretraining is run first.

Output:
    artifacts/compare_mtl/dice.jsonl, dice_summary.json, dice.png
    artifacts/compare_mtl/comparison.jsonl
    artifacts/compare_mtl/result.json
"""

from __future__ import annotations

import argparse
import json
import logging
from dataclasses import asdict, replace
from pathlib import Path

from depthreg.experiments import ComparisonSettings, DepthAccuracySettings, run_comparison, run_depth_accuracy

ART_DIR = Path(__file__).resolve().parent.parent / "artifacts" / "compare_mtl"


def main() -> None:
    defaults = ComparisonSettings()
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--pretrain", type=Path, default=None,
                    help="output dir of calibrate_depth.py (holds data/ and pretrain/last.pt)")
    ap.add_argument("--epochs", type=int, default=defaults.epochs)
    ap.add_argument("--labeled", type=int, default=defaults.labeled_scenes)
    ap.add_argument("--stereo", type=int, default=defaults.stereo_scenes)
    ap.add_argument("--seeds", default=",".join(map(str, defaults.seeds)))
    ap.add_argument("--depth-weight", type=float, default=defaults.depth_weight)
    ap.add_argument("--out", type=Path, default=ART_DIR)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    settings = replace(defaults, epochs=args.epochs, labeled_scenes=args.labeled, stereo_scenes=args.stereo,
                       depth_weight=args.depth_weight,
                       seeds=tuple(int(s) for s in args.seeds.split(",")))
    depth = DepthAccuracySettings()
    args.out.mkdir(parents=True, exist_ok=True)
    if args.pretrain is None:
        pre = run_depth_accuracy(depth, args.out / "pretrain_run")
        data_root, ckpt = pre["data_root"], pre["checkpoint"]
    else:
        data_root, ckpt = args.pretrain / "data", args.pretrain / "pretrain" / "last.pt"

    res = run_comparison(settings, depth, args.out, data_root, ckpt)
    (args.out / "result.json").write_text(json.dumps({"settings": asdict(settings), **res}, indent=1))
    for arm in ("joint", "seg_only"):
        folds = "  ".join(f"{k} {v:.4f}" for k, v in res[f"{arm}_folds"].items())
        print(f"{arm:<8} mean Dice {res[arm]:.4f}  ({folds})")
    print(f"wilcoxon n={res['n']} W={res['statistic']:.1f} p={res['p_value']:.4g} ({res['direction']})")
    verdict = "PASS" if res["joint"] >= res["seg_only"] - settings.margin else "FAIL"
    print(f"{verdict} joint >= seg_only - {settings.margin}  ({res['seconds']:.0f}s)")


if __name__ == "__main__":
    main()
