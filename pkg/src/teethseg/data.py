"""Synthetic dental-arch scenes and dataset persistence.

Sixteen ellipse-like blobs sit along a parabolic arch in the fixed arch
order (right third molar .. right central incisor | left central incisor ..
left third molar). Contralateral partners share base size, eccentricity,
and orientation, mirrored exactly across the midline, so a scene generated
with zero jitter and zero dropout has a bitwise mirror-symmetric label map
under the class pairing Ti <-> Ti+8. Per-class intensity offsets are capped
at 10% of the dynamic range and sit under comparable noise: arch position,
not texture, is the signal that separates classes.

Overlaps resolve by nearer-to-arch-center priority (front teeth win), with
the normalized ellipse distance breaking exact-distance ties (mirror pairs).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .arch import ARCH_SEQUENCE, N_TOOTH_CLASSES
from .errors import ConfigError, DataError
from .tsr import read_tsr, write_tsr

# Per anatomical type 1..8 (central incisor .. third molar): semi-axis along
# the arch, in pixels at width 64; scaled with the canvas.
_TYPE_RADIUS = np.array([2.3, 2.3, 2.4, 2.6, 2.6, 3.0, 3.0, 2.8])

# Scrambled per-class brightness offsets, max spread 0.1 of dynamic range.
_CLASS_OFFSET = (((np.arange(N_TOOTH_CLASSES) * 7 + 3) % 16) / 15.0) * 0.1 - 0.05

_BG_LEVEL = 0.15
_TOOTH_LEVEL = 0.70


@dataclass
class SceneConfig:
    height: int = 64
    width: int = 64
    channels: int = 1
    curvature_min: float = 12.0  # arch rise in pixels at width 64
    curvature_max: float = 20.0
    size_min: float = 0.90  # multiplier on the per-type radius
    size_max: float = 1.10
    eccentricity_min: float = 1.3  # across-arch semi-axis / along-arch semi-axis
    eccentricity_max: float = 1.8
    dropout: float = 0.15  # per-tooth removal probability
    crowding_jitter: float = 1.0  # max |position jitter| in pixels
    intensity_noise: float = 0.04
    absent_teeth: tuple[int, ...] = ()  # 1-based classes never placed
    seed: int = 0

    def validate(self) -> "SceneConfig":
        if not 0.0 <= self.dropout <= 1.0:
            raise ConfigError(f"dropout must be in [0,1], got {self.dropout}")
        if self.crowding_jitter < 0 or self.intensity_noise < 0:
            raise ConfigError("jitter and noise must be nonnegative")
        if self.size_min <= 0 or self.size_max < self.size_min:
            raise ConfigError(f"bad size range [{self.size_min}, {self.size_max}]")
        if self.eccentricity_min <= 0 or self.eccentricity_max < self.eccentricity_min:
            raise ConfigError(f"bad eccentricity range")
        if any(t < 1 or t > 16 for t in self.absent_teeth):
            raise ConfigError(f"absent_teeth must be 1..16, got {self.absent_teeth}")
        return self


@dataclass
class LabeledScene:
    image: np.ndarray  # (H, W, C) in [0, 1]
    labels: np.ndarray  # (H, W) ints in {0..16}
    present: np.ndarray  # (16,) bool

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        self.present = np.asarray(self.present, dtype=bool)


def splitmix64(seed: int, index: int) -> int:
    """Independent per-scene seed derived from a master seed."""
    z = (seed + (index + 1) * 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


def _arch_geometry(cfg: SceneConfig, rng: np.random.Generator):
    """Mirror-exact tooth geometry: pair k holds classes k+1 (left of the
    midline gets the negated x offset) and k+9 (positive offset)."""
    H, W = cfg.height, cfg.width
    scale = W / 64.0
    half_span = 0.43 * (W - 1)
    y_front = 0.70 * H
    rise = rng.uniform(cfg.curvature_min, cfg.curvature_max) * scale

    pairs = []
    for k in range(8):
        t = (k + 0.5) / 8.0
        dx = t * half_span
        y = y_front - rise * t * t
        a = _TYPE_RADIUS[k] * scale * rng.uniform(cfg.size_min, cfg.size_max)
        b = a * rng.uniform(cfg.eccentricity_min, cfg.eccentricity_max)
        # Tangent of the arch at t; right side leans one way, left mirrors.
        slope = -2.0 * rise * t / half_span
        theta = np.arctan(slope)
        pairs.append((dx, y, a, b, np.cos(theta), np.sin(theta)))

    teeth = {}
    for k, (dx, y, a, b, c, s) in enumerate(pairs):
        # ellipse frame axes: (c, s) along the arch, mirrored exactly on the left
        teeth[k + 9] = (dx, y, a, b, c, s)  # right of midline
        teeth[k + 1] = (-dx, y, a, b, -c, s)  # left of midline
    lowest = y_front
    highest = min(g[1] - g[3] for g in teeth.values())
    widest = max(abs(g[0]) + g[2] for g in teeth.values())
    if highest < 1 or lowest + max(g[3] for g in teeth.values()) > H - 2 or widest > (W - 1) / 2 - 1:
        raise ConfigError(f"arch does not fit a {H}x{W} canvas with these ranges")
    return teeth, rise


def generate_scene(cfg: SceneConfig, index: int = 0) -> LabeledScene:
    cfg.validate()
    rng = np.random.default_rng(splitmix64(cfg.seed, index))
    H, W = cfg.height, cfg.width
    teeth, _ = _arch_geometry(cfg, rng)

    jitter = {
        tooth: (rng.uniform(-cfg.crowding_jitter, cfg.crowding_jitter),
                rng.uniform(-cfg.crowding_jitter, cfg.crowding_jitter))
        if cfg.crowding_jitter > 0 else (0.0, 0.0)
        for tooth in range(1, 17)
    }
    dropped = {tooth: rng.random() < cfg.dropout for tooth in range(1, 17)}
    for tooth in cfg.absent_teeth:
        dropped[tooth] = True

    cx = (W - 1) / 2.0
    xs = np.arange(W, dtype=np.float64) - cx  # exact, and xs[W-1-i] == -xs[i]
    ys = np.arange(H, dtype=np.float64)

    labels = np.zeros((H, W), dtype=np.int64)
    best_dist = np.full((H, W), np.inf)
    best_rho = np.full((H, W), np.inf)
    for tooth in ARCH_SEQUENCE:
        if dropped[tooth]:
            continue
        dx, y, a, b, c, s = teeth[tooth]
        jx, jy = jitter[tooth]
        du = (xs[None, :] - dx) - jx
        dv = (ys[:, None] - y) - jy
        p = (c * du + s * dv) / a
        q = (-s * du + c * dv) / b
        rho = p * p + q * q
        # Priority = squared x-distance to the midline; mirror pairs tie exactly
        # and fall through to the rho comparison.
        dist = dx * dx
        inside = rho <= 1.0
        closer = inside & ((dist < best_dist) | ((dist == best_dist) & (rho < best_rho)))
        labels[closer] = tooth
        best_dist[closer] = dist
        best_rho[closer] = rho[closer]

    img = np.full((H, W), _BG_LEVEL)
    for tooth in range(1, 17):
        img[labels == tooth] = _TOOTH_LEVEL + _CLASS_OFFSET[tooth - 1]
    image = np.repeat(img[:, :, None], cfg.channels, axis=2)
    if cfg.intensity_noise > 0:
        image = image + rng.normal(0.0, cfg.intensity_noise, size=image.shape)
    image = np.clip(image, 0.0, 1.0)

    present = np.array([(labels == k + 1).any() for k in range(N_TOOTH_CLASSES)])
    return LabeledScene(image=image, labels=labels, present=present)


def generate_split(cfg: SceneConfig, count: int, index_offset: int = 0) -> list[LabeledScene]:
    return [generate_scene(cfg, index_offset + i) for i in range(count)]


# ---------------------------------------------------------------------------
# persistence: <root>/<split>/{images,labels}/NNNN.tsr + <root>/manifest.txt


def write_dataset(root: str, splits: dict[str, list[LabeledScene]]) -> None:
    os.makedirs(root, exist_ok=True)
    lines = []
    for split, scenes in splits.items():
        img_dir = os.path.join(root, split, "images")
        lab_dir = os.path.join(root, split, "labels")
        os.makedirs(img_dir, exist_ok=True)
        os.makedirs(lab_dir, exist_ok=True)
        for i, scene in enumerate(scenes):
            write_tsr(os.path.join(img_dir, f"{i:04d}.tsr"), scene.image)
            write_tsr(os.path.join(lab_dir, f"{i:04d}.tsr"), scene.labels.astype(np.float64))
        lines.append(f"{split}\t{len(scenes)}")
    with open(os.path.join(root, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(root: str) -> dict[str, int]:
    path = os.path.join(root, "manifest.txt")
    if not os.path.exists(path):
        raise DataError(f"no dataset manifest at {path}")
    counts = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                split, count = line.split("\t")
                counts[split] = int(count)
    return counts


def read_dataset(root: str, split: str) -> list[LabeledScene]:
    counts = read_manifest(root)
    if split not in counts:
        raise DataError(f"split {split!r} not in manifest (has {sorted(counts)})")
    scenes = []
    for i in range(counts[split]):
        image = read_tsr(os.path.join(root, split, "images", f"{i:04d}.tsr"))
        raw = read_tsr(os.path.join(root, split, "labels", f"{i:04d}.tsr"))
        labels = raw.astype(np.int64)
        if (raw != labels).any() or labels.min() < 0 or labels.max() > N_TOOTH_CLASSES:
            raise DataError(f"{root}/{split}/labels/{i:04d}.tsr holds non-label values")
        present = np.array([(labels == k + 1).any() for k in range(N_TOOTH_CLASSES)])
        scenes.append(LabeledScene(image=image, labels=labels, present=present))
    return scenes


def presence_stats(scenes: list[LabeledScene]) -> dict:
    """Per-class presence counts plus aggregate tooth-loss rate."""
    counts = np.zeros(N_TOOTH_CLASSES, dtype=int)
    for s in scenes:
        counts += s.present.astype(int)
    n = len(scenes)
    return {
        "scenes": n,
        "per_class_present": counts,
        "per_class_rate": counts / n if n else counts.astype(float),
        "tooth_loss_rate": 1.0 - counts.sum() / (n * N_TOOTH_CLASSES) if n else 0.0,
        "mean_teeth_per_scene": counts.sum() / n if n else 0.0,
    }
