"""Command-line entry point: ``depthreg <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from depthreg import config as cfgmod

log = logging.getLogger("depthreg")

SUBCOMMANDS = ("synth", "pretrain", "finetune", "eval", "loocv", "compare", "gradcheck", "infer")


def _resolve_config(args, stage: str | None = None) -> cfgmod.RunConfig:
    cfg = cfgmod.load(args.config) if args.config else cfgmod.RunConfig.defaults(stage or "pretrain")
    if stage and cfg.stage != stage:
        cfg = cfgmod.set_key(cfg, "stage", stage)
    for item in args.set or []:
        if "=" not in item:
            raise cfgmod.ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        cfg = cfgmod.set_key(cfg, key, value)
    if args.seed is not None:
        cfg = cfgmod.set_key(cfg, "seed", str(args.seed))
    cfg.validate()
    return cfg


def _snapshot(out: Path, args, cfg: cfgmod.RunConfig | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    inv = {k: v for k, v in vars(args).items() if k != "func"}
    (out / "invocation.json").write_text(json.dumps(inv, indent=1, default=str))
    if cfg is not None:
        (out / "resolved_config.ini").write_text(cfgmod.dumps(cfg))


# --------------------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    from depthreg.synthgen import emit_dataset, random_scene

    out = Path(args.out)
    _snapshot(out, args)
    rng = np.random.default_rng(args.seed or 0)
    specs = [random_scene(rng, (args.size, args.size), group=f"g{i % args.groups}") for i in range(args.scenes)]
    fractions = tuple(float(x) for x in args.split.split(","))
    manifest = emit_dataset(specs, out, fractions, seed=args.seed or 0, degrade_suite=args.degrade)
    print(f"wrote {len(manifest.records)} records to {out}")
    return 0


def _train(args, stage: str) -> int:
    from depthreg import pipeline

    cfg = _resolve_config(args, stage)
    out = Path(args.out)
    _snapshot(out, args, cfg)
    trainer = (pipeline.pretrain if stage == "pretrain" else pipeline.finetune)(cfg, out, max_steps=args.max_steps)
    trainer.save(out / "last.pt")
    log_tail = trainer.state.loss_log[-1] if trainer.state.loss_log else {}
    print(f"{stage} done: epoch {trainer.state.epoch}, step {trainer.state.global_step}, last {log_tail}")
    return 0


def cmd_pretrain(args) -> int:
    return _train(args, "pretrain")


def cmd_finetune(args) -> int:
    return _train(args, "finetune")


def cmd_eval(args) -> int:
    from depthreg import data, evaluation, pipeline

    out = Path(args.out)
    _snapshot(out, args)
    model = pipeline.load_model(args.checkpoint)
    manifest = data.load_manifest(args.data)
    split = args.split or None
    if manifest.select("seg", split):
        scores = evaluation.evaluate_segmentation(model, manifest, split)
        report = evaluation.DiceReport.from_per_image(args.method, {split or "all": scores})
        evaluation.emit_report(report, out / "dice")
        print(f"mean Dice {report.grand_mean:.4f} +- {report.grand_sd:.4f} over {len(scores)} images")
    rows = evaluation.evaluate_depth(model, manifest, split)
    if rows:
        evaluation.write_jsonl(out / "depth.jsonl", rows)
        print(f"depth: mean MAE {np.mean([r['mae_px'] for r in rows]):.3f}px, "
              f"mean MAE/range {np.mean([r['mae_over_range'] for r in rows]):.3f} over {len(rows)} scenes")
    return 0


def cmd_loocv(args) -> int:
    from depthreg import data, evaluation

    cfg = _resolve_config(args, "finetune")
    out = Path(args.out)
    _snapshot(out, args, cfg)
    folds = args.folds.split(",") if args.folds else data.load_manifest(cfg.data.seg or cfg.data.dep).groups
    report = evaluation.loocv(cfg, folds, out, method=args.method, max_steps=args.max_steps)
    evaluation.emit_report(report, out / "loocv")
    print(f"LOOCV mean Dice {report.grand_mean:.4f} +- {report.grand_sd:.4f} over {len(folds)} folds")
    return 0


def cmd_compare(args) -> int:
    from depthreg import evaluation

    cfg = _resolve_config(args, "finetune")
    out = Path(args.out)
    _snapshot(out, args, cfg)
    seeds = [int(s) for s in args.seeds.split(",")]
    joint, ablation, result = evaluation.compare_arms(cfg, seeds, out, max_steps=args.max_steps)
    evaluation.emit_report([joint, ablation], out / "dice")
    evaluation.emit_report(result, out / "comparison")
    print(f"joint {joint.grand_mean:.4f} vs seg_only {ablation.grand_mean:.4f}; "
          f"Wilcoxon n={result.n} W={result.statistic} p={result.p_value:.4g} ({result.direction})")
    return 0


def cmd_gradcheck(args) -> int:
    from depthreg.gradcheck import format_table, run_suite

    results = run_suite(args.instances, args.seed or 0)
    print(format_table(results))
    if args.out:
        _snapshot(Path(args.out), args)
    return 0 if all(r.passed for r in results) else 1


def cmd_infer(args) -> int:
    import torch
    from PIL import Image

    from depthreg import data, model as modelmod, pipeline
    from depthreg.synthgen import write_gt_disparity

    out = Path(args.out)
    if args.checkpoint:
        net = pipeline.load_model(args.checkpoint)
        _snapshot(out, args)
    else:
        cfg = _resolve_config(args)
        torch.manual_seed(cfg.seed)
        net = modelmod.build(cfg.model)
        _snapshot(out, args, cfg)
    net.eval()
    img = data.load_image(args.image)
    if img.shape[:2] == (720, 1280):
        img = data.preprocess_raw(img, "endoscope_1280x720")
    h, w = net.config.input_size
    if img.shape[:2] != (h, w):
        img = data._resize(img, (h, w))
    x = data.to_tensor(img)[None]
    mask = modelmod.infer_segmentation(net, x)[0].numpy().astype(np.uint8)
    disp = modelmod.infer_depth(net, x)[0, 0].numpy()
    stem = Path(args.image).stem
    pal = Image.fromarray(mask, mode="P")
    palette = [0, 0, 0, 230, 220, 60, 60, 160, 230, 230, 90, 60, 180, 60, 200]
    pal.putpalette(palette + [0] * (768 - len(palette)))
    pal.save(out / f"{stem}_mask.png")
    write_gt_disparity(out / f"{stem}_disparity.bin", disp)
    import matplotlib

    matplotlib.use("Agg")
    from matplotlib import cm

    rgb = cm.magma(disp / net.config.d_max)[..., :3]
    data.save_png(out / f"{stem}_disparity.png", rgb)
    print(f"mask classes {sorted(set(mask.ravel().tolist()))}, disparity range [{disp.min():.4f}, {disp.max():.4f}]")
    return 0


# --------------------------------------------------------------------------- parser

def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", help="run config file (sectioned key = value)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--seed", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="depthreg", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic stereo + segmentation dataset")
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--groups", type=int, default=5, help="number of scene groups (LOOCV folds)")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--split", default="0.8,0.2", help="train,test fractions")
    p.add_argument("--degrade", action="store_true", help="also write degraded copies")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    for name, func in (("pretrain", cmd_pretrain), ("finetune", cmd_finetune)):
        p = sub.add_parser(name, help=f"run the {name} stage")
        _common(p)
        p.add_argument("--max-steps", type=int, default=None)
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--method", default="model")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("loocv", help="leave-one-group-out cross-validation")
    _common(p)
    p.add_argument("--folds", default="", help="comma-separated group ids (default: all)")
    p.add_argument("--method", default="joint")
    p.add_argument("--max-steps", type=int, default=None)
    p.set_defaults(func=cmd_loocv)

    p = sub.add_parser("compare", help="joint model vs depth_weight=0 ablation")
    _common(p)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--max-steps", type=int, default=None)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("infer", help="segment one image and estimate its disparity")
    _common(p)
    p.add_argument("--image", required=True)
    p.add_argument("--checkpoint", default=None, help="trained checkpoint (default: untrained model from --config)")
    p.set_defaults(func=cmd_infer)
    return parser


def _category(exc: Exception) -> str:
    from depthreg.data import DatasetError
    from depthreg.pipeline import CheckpointError, TrainingDiverged
    from depthreg.types import ContractViolation

    for cls, name in ((cfgmod.ConfigError, "config"), (DatasetError, "dataset"), (CheckpointError, "checkpoint"),
                      (TrainingDiverged, "diverged"), (ContractViolation, "contract"), (OSError, "io")):
        if isinstance(exc, cls):
            return name
    return "internal"


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # surfaced as one categorized line, details under -v
        log.debug("failure", exc_info=True)
        print(f"error[{_category(exc)}]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
