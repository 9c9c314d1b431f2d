#!/usr/bin/env python3
"""Two-sample joint overfit check.

Fine-tunes the tiny model (segmentation + depth losses) on a fixed batch of
two synthetic labeled stereo scenes and reports how far the joint loss falls.

Run:
    python3 scripts/overfit.py
    python3 scripts/overfit.py --steps 1000 --lr 1e-3

Output:
    artifacts/overfit/loss.json   per-step joint loss and final loss terms
"""

from __future__ import annotations

import argparse
import json
import tempfile
from dataclasses import asdict, replace
from pathlib import Path

from depthreg.experiments import OverfitSettings, run_overfit

ART_DIR = Path(__file__).resolve().parent.parent / "artifacts" / "overfit"


def main() -> None:
    defaults = OverfitSettings()
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=defaults.steps)
    ap.add_argument("--lr", type=float, default=defaults.lr)
    ap.add_argument("--base-channels", type=int, default=defaults.base_channels)
    ap.add_argument("--seed", type=int, default=defaults.seed)
    ap.add_argument("--out", type=Path, default=ART_DIR)
    args = ap.parse_args()

    s = replace(defaults, steps=args.steps, lr=args.lr, base_channels=args.base_channels, seed=args.seed)
    with tempfile.TemporaryDirectory() as tmp:
        res = run_overfit(s, tmp)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "loss.json").write_text(json.dumps({"settings": asdict(s), **res}, indent=1))
    verdict = "PASS" if res["reduction"] >= s.required_reduction else "FAIL"
    print(f"{verdict} joint loss {res['initial']:.4f} -> {res['final']:.4f} "
          f"({100 * res['reduction']:.1f}% reduction, need {100 * s.required_reduction:.0f}%) in {res['seconds']:.0f}s")


if __name__ == "__main__":
    main()
