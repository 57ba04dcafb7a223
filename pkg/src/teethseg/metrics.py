"""Per-class IoU and mIoU with absent-class exclusion.

A class is reported as NaN only when neither prediction nor ground truth
contains it anywhere in the split (empty union). Intersections and unions
accumulate across the whole split before dividing (dataset-level
aggregation); a per-scene averaging mode exists behind a flag for
sensitivity checks. Tooth classes alone enter the mIoU average; the
foreground/background IoU pair is reported separately.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .arch import N_TOOTH_CLASSES
from .errors import ContractError


def iou(pred: np.ndarray, gt: np.ndarray, k: int) -> float | None:
    """IoU of class k between two label maps; None marks an absent class."""
    if pred.shape != gt.shape:
        raise ContractError(f"label map shapes differ: {pred.shape} vs {gt.shape}")
    p = pred == k
    g = gt == k
    union = int(np.logical_or(p, g).sum())
    if union == 0:
        return None
    return int(np.logical_and(p, g).sum()) / union


@dataclass
class IoUReport:
    per_class: np.ndarray  # (16,) floats, NaN for absent classes
    miou: float
    fg_iou: float
    bg_iou: float

    def csv_header(self) -> str:
        return ",".join([f"T{i + 1}" for i in range(N_TOOTH_CLASSES)] + ["mIoU"])

    def csv_row(self) -> str:
        cells = ["NaN" if math.isnan(v) else f"{v:.4f}" for v in self.per_class]
        cells.append(f"{self.miou:.4f}")
        return ",".join(cells)


class IoUAccumulator:
    """Mergeable confusion accumulator over label maps in {0..16}."""

    def __init__(self):
        self.inter = np.zeros(N_TOOTH_CLASSES, dtype=np.int64)
        self.union = np.zeros(N_TOOTH_CLASSES, dtype=np.int64)
        self.fb_inter = np.zeros(2, dtype=np.int64)  # [foreground, background]
        self.fb_union = np.zeros(2, dtype=np.int64)

    def update(self, pred: np.ndarray, gt: np.ndarray) -> None:
        if pred.shape != gt.shape:
            raise ContractError(f"label map shapes differ: {pred.shape} vs {gt.shape}")
        for k in range(1, N_TOOTH_CLASSES + 1):
            p = pred == k
            g = gt == k
            self.inter[k - 1] += np.logical_and(p, g).sum()
            self.union[k - 1] += np.logical_or(p, g).sum()
        pf, gf = pred > 0, gt > 0
        self.fb_inter[0] += np.logical_and(pf, gf).sum()
        self.fb_union[0] += np.logical_or(pf, gf).sum()
        self.fb_inter[1] += np.logical_and(~pf, ~gf).sum()
        self.fb_union[1] += np.logical_or(~pf, ~gf).sum()

    def merge(self, other: "IoUAccumulator") -> None:
        self.inter += other.inter
        self.union += other.union
        self.fb_inter += other.fb_inter
        self.fb_union += other.fb_union

    def report(self) -> IoUReport:
        defined = self.union > 0
        if not defined.any():
            raise ContractError("no class has a nonempty union; mIoU undefined")
        per_class = np.full(N_TOOTH_CLASSES, np.nan)
        per_class[defined] = self.inter[defined] / self.union[defined]
        miou = float(per_class[defined].mean())
        fb = np.where(self.fb_union > 0, self.fb_inter / np.maximum(self.fb_union, 1), np.nan)
        return IoUReport(per_class=per_class, miou=miou, fg_iou=float(fb[0]), bg_iou=float(fb[1]))


def evaluate_pairs(pairs: list[tuple[np.ndarray, np.ndarray]], per_scene: bool = False) -> IoUReport:
    """Report over (pred, gt) pairs. per_scene=True averages each class's
    scene-level IoUs instead of pooling counts first.
    """
    if not per_scene:
        acc = IoUAccumulator()
        for pred, gt in pairs:
            acc.update(pred, gt)
        return acc.report()

    sums = np.zeros(N_TOOTH_CLASSES)
    counts = np.zeros(N_TOOTH_CLASSES, dtype=int)
    fb = IoUAccumulator()
    for pred, gt in pairs:
        fb.update(pred, gt)
        for k in range(1, N_TOOTH_CLASSES + 1):
            v = iou(pred, gt, k)
            if v is not None:
                sums[k - 1] += v
                counts[k - 1] += 1
    defined = counts > 0
    if not defined.any():
        raise ContractError("no class has a nonempty union; mIoU undefined")
    per_class = np.full(N_TOOTH_CLASSES, np.nan)
    per_class[defined] = sums[defined] / counts[defined]
    pooled = fb.report()
    return IoUReport(
        per_class=per_class,
        miou=float(per_class[defined].mean()),
        fg_iou=pooled.fg_iou,
        bg_iou=pooled.bg_iou,
    )
