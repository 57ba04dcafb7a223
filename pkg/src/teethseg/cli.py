"""Operator entry points.

Subcommands: gen | train | eval | ablate | gradcheck. Every run writes its
resolved config alongside its outputs; report paths emit CSV plus a rendered
PNG figure of the same data. Exit codes: 0 success, 1 config error, 2
data/format error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import tensor as T
from .arch import build_apk_mask
from .ablation import run_ablation, write_summary_csv
from .config import load_config, scene_config, write_resolved
from .data import generate_scene, generate_split, presence_stats, read_dataset, write_dataset
from .errors import ConfigError, DataError, NumericError, TeethSegError
from .model import Tensor, loss as model_loss
from .tensor import finite_diff_check
from .trainer import check_compatible, evaluate_model, load_checkpoint, train

GRADCHECK_PROFILE = {
    "image_height": 16,
    "image_width": 16,
    "patch": 4,
    "embed_dim": 16,
    "fusion_layers": 1,
    "msa_blocks": 1,
    "naive_upscalers": 1,
    "heads": 2,
    "encoder_depth": 1,
    "precision": "f64",
}


def _overrides(args) -> dict:
    out = {}
    if args.seed is not None:
        out["seed"] = args.seed
    if getattr(args, "lth_over_all_pixels", False):
        out["lth_over_all_pixels"] = True
    return out


def cmd_gen(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    out = args.out
    if os.path.isdir(out) and os.listdir(out) and not args.force:
        raise ConfigError(f"output dir {out} is not empty (use --force to overwrite)")
    os.makedirs(out, exist_ok=True)
    scfg = scene_config(cfg)
    counts = {"train": cfg["train_scenes"], "val": cfg["val_scenes"], "test": cfg["test_scenes"]}
    splits = {}
    offset = 0
    for split, n in counts.items():
        splits[split] = generate_split(scfg, n, index_offset=offset)
        offset += n
    write_dataset(out, splits)
    write_resolved(cfg, out)

    lines = ["split,scenes," + ",".join(f"T{i + 1}" for i in range(16)) + ",tooth_loss_rate,mean_teeth"]
    print(f"{'split':<8}{'scenes':>8}{'teeth/scene':>14}{'tooth loss':>12}")
    for split, scenes in splits.items():
        st = presence_stats(scenes)
        rates = ",".join(f"{r:.3f}" for r in st["per_class_rate"])
        lines.append(
            f"{split},{st['scenes']},{rates},{st['tooth_loss_rate']:.4f},{st['mean_teeth_per_scene']:.3f}"
        )
        print(
            f"{split:<8}{st['scenes']:>8}{st['mean_teeth_per_scene']:>14.2f}"
            f"{st['tooth_loss_rate']:>12.3f}"
        )
    with open(os.path.join(out, "presence_stats.csv"), "w") as fh:
        fh.write("\n".join(lines) + "\n")

    from .plots import save_scene_montage

    save_scene_montage(splits["train"][:4], os.path.join(out, "sample_scenes.png"))
    print(f"dataset written to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    summary = train(cfg, args.data, args.out, resume_from=args.resume)

    mask = build_apk_mask()
    with open(os.path.join(args.out, "apk_mask.txt"), "w") as fh:
        fh.write(mask.to_text_grid() + "\n")

    from .plots import save_mask_grid, save_training_curves

    save_training_curves(summary.train_log, summary.val_log, os.path.join(args.out, "train_curve.png"))
    save_mask_grid(mask, os.path.join(args.out, "apk_mask.png"))
    print(
        f"trained {summary.steps} steps in {summary.wall_seconds:.1f}s; "
        f"best val mIoU {summary.best_val_miou:.4f}"
    )
    print(f"checkpoints: {summary.best_checkpoint} (best), {summary.last_checkpoint} (last)")
    return 0


def cmd_eval(args) -> int:
    ckpt_cfg, model, _, _ = load_checkpoint(args.checkpoint)
    if args.config is not None:
        cfg = load_config(args.config, _overrides(args))
        check_compatible(cfg, ckpt_cfg, "eval")
    scenes = read_dataset(args.data, args.split)
    report = evaluate_model(model, scenes, per_scene=args.per_scene)

    os.makedirs(args.out, exist_ok=True)
    write_resolved(ckpt_cfg, args.out)
    iou_csv = os.path.join(args.out, "iou_report.csv")
    with open(iou_csv, "w") as fh:
        fh.write(report.csv_header() + "\n" + report.csv_row() + "\n")
    with open(os.path.join(args.out, "fb_report.csv"), "w") as fh:
        fh.write("foreground,background\n")
        fh.write(f"{report.fg_iou:.4f},{report.bg_iou:.4f}\n")

    from .plots import save_iou_bars

    save_iou_bars(report, os.path.join(args.out, "iou_per_class.png"))
    print(report.csv_header())
    print(report.csv_row())
    print(f"fb IoU: fg={report.fg_iou:.4f} bg={report.bg_iou:.4f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    results = run_ablation(cfg, args.data, args.out, variants=args.variants)
    write_summary_csv(results, os.path.join(args.out, "ablation_summary.csv"))

    from .plots import save_ablation_bars

    save_ablation_bars(results, os.path.join(args.out, "ablation_miou.png"))
    for r in results:
        print(f"variant {r.variant}: test mIoU {r.test_miou:.4f} ({r.wall_seconds:.0f}s)")
    return 0


def cmd_gradcheck(args) -> int:
    overrides = dict(GRADCHECK_PROFILE)
    overrides.update(_overrides(args))
    cfg = load_config(args.config, overrides)
    if args.inject_fault:
        T.GRAD_FAULT = args.inject_fault
    try:
        from .trainer import build_model

        model = build_model(cfg)
        scene = generate_scene(scene_config(cfg), 0)
        params = dict(model.named_parameters())

        def f():
            scores = model.forward(Tensor(scene.image))
            return model_loss(scores, scene.labels, cfg["lth_over_all_pixels"])[2]

        report = finite_diff_check(f, params, tol=args.tol)
    finally:
        T.GRAD_FAULT = None

    for line in report.lines():
        print(line)
    print(f"{'PASS' if report.passed else 'FAIL'}: worst rel_err {report.worst:.3e} over "
          f"{len(report.entries)} parameter groups (tol {args.tol:g})")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        write_resolved(cfg, args.out)
        with open(os.path.join(args.out, "gradcheck_report.txt"), "w") as fh:
            fh.write("\n".join(report.lines()) + "\n")
    if not report.passed:
        raise NumericError(f"gradient check failed (worst rel_err {report.worst:.3e})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="teethseg")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False, out=True):
        p.add_argument("--config", default=None, help="key = value config file")
        if data:
            p.add_argument("--data", required=True, help="dataset directory")
        if out:
            p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--force", action="store_true")
        p.add_argument("--lth-over-all-pixels", action="store_true", dest="lth_over_all_pixels")

    p = sub.add_parser("gen", help="synthesize and persist dataset splits")
    common(p)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="train with periodic validation and checkpoints")
    common(p, data=True)
    p.add_argument("--resume", default=None, help="checkpoint directory to resume from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint, emit IoU report CSV")
    common(p, data=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--per-scene", action="store_true", dest="per_scene")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="train and score the component-ablation variants")
    common(p, data=True)
    p.add_argument("--variants", default="abcdef")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check over all parameter groups")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--inject-fault", default=None, help=argparse.SUPPRESS)
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return 2
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return 3
    except TeethSegError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
