"""Component ablation matrix.

Six variants trained under a shared seed and budget so differences are
architectural:

  a: every permutation/linear upscaler replaced by bilinear interpolation
  b: gating swapped for standard cross/self-attention in the aggregation
     blocks and the prior-knowledge layer
  c: aggregation blocks removed (upscaler chain kept for resolution, no
     class-token updates, no skips)
  d: prior-knowledge layer removed
  e: both removed (upscalers and bilinear skips kept, no gating anywhere
     past the fusion stage)
  f: the full model
"""

from __future__ import annotations

import os
from dataclasses import dataclass

from .config import write_resolved
from .trainer import TrainSummary, evaluate_model, load_checkpoint, train
from .data import read_dataset

VARIANTS: dict[str, dict] = {
    "a": {"upscale_mode": "bilinear", "mixer_mode": "gating", "use_msa": True, "use_apk": True,
          "skip_connections": True},
    "b": {"upscale_mode": "permute", "mixer_mode": "attention", "use_msa": True, "use_apk": True,
          "skip_connections": True},
    "c": {"upscale_mode": "permute", "mixer_mode": "gating", "use_msa": False, "use_apk": True,
          "skip_connections": False},
    "d": {"upscale_mode": "permute", "mixer_mode": "gating", "use_msa": True, "use_apk": False,
          "skip_connections": True},
    "e": {"upscale_mode": "permute", "mixer_mode": "gating", "use_msa": False, "use_apk": False,
          "skip_connections": True},
    "f": {"upscale_mode": "permute", "mixer_mode": "gating", "use_msa": True, "use_apk": True,
          "skip_connections": True},
}


@dataclass
class VariantResult:
    variant: str
    test_miou: float
    fg_iou: float
    best_val_miou: float
    wall_seconds: float


def variant_config(cfg: dict, variant: str) -> dict:
    out = dict(cfg)
    out.update(VARIANTS[variant])
    # Shared budget: the ablation schedule replaces the headline schedule.
    out["epochs"] = cfg["ablate_epochs"]
    out["max_steps"] = 0
    out["early_stop_miou"] = 0.0
    return out


def run_ablation(
    cfg: dict,
    data_dir: str,
    out_dir: str,
    variants: str = "abcdef",
) -> list[VariantResult]:
    os.makedirs(out_dir, exist_ok=True)
    write_resolved(cfg, out_dir)
    limit = cfg["ablate_train_scenes"]
    test_scenes = read_dataset(data_dir, "test")

    results = []
    for v in variants:
        vcfg = variant_config(cfg, v)
        vdir = os.path.join(out_dir, f"variant_{v}")
        summary: TrainSummary = train(vcfg, data_dir, vdir, train_limit=limit)
        _, model, _, _ = load_checkpoint(summary.best_checkpoint)
        report = evaluate_model(model, test_scenes)
        results.append(
            VariantResult(
                variant=v,
                test_miou=report.miou,
                fg_iou=report.fg_iou,
                best_val_miou=summary.best_val_miou,
                wall_seconds=summary.wall_seconds,
            )
        )
    return results


def write_summary_csv(results: list[VariantResult], path: str) -> None:
    with open(path, "w") as fh:
        fh.write("variant,test_miou,fg_iou,best_val_miou,wall_seconds\n")
        for r in results:
            fh.write(
                f"{r.variant},{r.test_miou:.6f},{r.fg_iou:.6f},"
                f"{r.best_val_miou:.6f},{r.wall_seconds:.1f}\n"
            )
