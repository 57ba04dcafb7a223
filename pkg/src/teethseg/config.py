"""Flat key-value run configuration.

Config files are ``key = value`` lines (# comments allowed). Unknown keys
are rejected. Every command writes its fully resolved configuration next to
its outputs so a run is reproducible from that file alone. The env var
TEETHSEG_PRECISION={f32,f64} overrides the configured precision.
"""

from __future__ import annotations

import os

from .data import SceneConfig
from .errors import ConfigError
from .model import ModelConfig

DEFAULTS: dict[str, object] = {
    # image / model geometry
    "image_height": 64,
    "image_width": 64,
    "image_channels": 1,
    "patch": 8,
    "embed_dim": 64,
    "fusion_layers": 2,
    "msa_blocks": 2,
    "naive_upscalers": 1,
    "heads": 4,
    "encoder_depth": 4,
    "precision": "f64",
    # architecture variant toggles
    "upscale_mode": "permute",
    "mixer_mode": "gating",
    "use_msa": True,
    "use_apk": True,
    "skip_connections": True,
    "gating_residual": True,
    "gating_normalize": False,
    # loss
    "lth_over_all_pixels": False,
    # synthetic scenes
    "scene_curvature_min": 12.0,
    "scene_curvature_max": 20.0,
    "scene_size_min": 0.90,
    "scene_size_max": 1.10,
    "scene_eccentricity_min": 1.3,
    "scene_eccentricity_max": 1.8,
    "scene_dropout": 0.15,
    "scene_crowding_jitter": 1.0,
    "scene_intensity_noise": 0.04,
    "absent_teeth": "",  # comma-separated 1-based classes never generated
    # dataset sizes
    "train_scenes": 2000,
    "val_scenes": 200,
    "test_scenes": 200,
    # training
    "lr": 3e-4,
    "batch_size": 8,
    "epochs": 10,
    "eval_every": 1,
    "early_stop_miou": 0.0,  # stop once val mIoU reaches this (0 = off)
    "max_steps": 0,  # 0 = no cap; step-granular cap for resume tests
    "seed": 0,
    # ablation budget (shared across variants)
    "ablate_train_scenes": 600,
    "ablate_epochs": 3,
}


def _parse_value(key: str, raw: str, default) -> object:
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from exc
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from exc
    return raw


def load_config(path: str | None = None, overrides: dict | None = None) -> dict:
    cfg = dict(DEFAULTS)
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
                key, raw = (part.strip() for part in line.split("=", 1))
                if key not in DEFAULTS:
                    raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
                cfg[key] = _parse_value(key, raw, DEFAULTS[key])
    if overrides:
        for key, val in overrides.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            cfg[key] = val
    env_precision = os.environ.get("TEETHSEG_PRECISION")
    if env_precision:
        if env_precision not in ("f32", "f64"):
            raise ConfigError(f"TEETHSEG_PRECISION must be f32 or f64, got {env_precision!r}")
        cfg["precision"] = env_precision
    return cfg


def resolved_text(cfg: dict) -> str:
    return "\n".join(f"{k} = {cfg[k]}" for k in DEFAULTS) + "\n"


def write_resolved(cfg: dict, out_dir: str, name: str = "config_resolved.txt") -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    with open(path, "w") as fh:
        fh.write(resolved_text(cfg))
    return path


def parse_absent_teeth(cfg: dict) -> tuple[int, ...]:
    raw = str(cfg["absent_teeth"]).strip()
    if not raw:
        return ()
    try:
        teeth = tuple(int(tok) for tok in raw.split(",") if tok.strip())
    except ValueError as exc:
        raise ConfigError(f"absent_teeth: expected comma-separated integers, got {raw!r}") from exc
    return teeth


def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(
        height=cfg["image_height"],
        width=cfg["image_width"],
        channels=cfg["image_channels"],
        patch=cfg["patch"],
        embed_dim=cfg["embed_dim"],
        fusion_layers=cfg["fusion_layers"],
        msa_blocks=cfg["msa_blocks"],
        naive_upscalers=cfg["naive_upscalers"],
        heads=cfg["heads"],
        encoder_depth=cfg["encoder_depth"],
        precision=cfg["precision"],
        upscale_mode=cfg["upscale_mode"],
        mixer_mode=cfg["mixer_mode"],
        use_msa=cfg["use_msa"],
        use_apk=cfg["use_apk"],
        skip_connections=cfg["skip_connections"],
        gating_residual=cfg["gating_residual"],
        gating_normalize=cfg["gating_normalize"],
    ).validate()


def scene_config(cfg: dict, seed: int | None = None) -> SceneConfig:
    return SceneConfig(
        height=cfg["image_height"],
        width=cfg["image_width"],
        channels=cfg["image_channels"],
        curvature_min=cfg["scene_curvature_min"],
        curvature_max=cfg["scene_curvature_max"],
        size_min=cfg["scene_size_min"],
        size_max=cfg["scene_size_max"],
        eccentricity_min=cfg["scene_eccentricity_min"],
        eccentricity_max=cfg["scene_eccentricity_max"],
        dropout=cfg["scene_dropout"],
        crowding_jitter=cfg["scene_crowding_jitter"],
        intensity_noise=cfg["scene_intensity_noise"],
        absent_teeth=parse_absent_teeth(cfg),
        seed=cfg["seed"] if seed is None else seed,
    ).validate()
