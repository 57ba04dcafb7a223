"""Training loop: deterministic batching, CSV curves, checkpointing, resume.

Batch order for epoch e is a permutation drawn from a generator seeded by
(seed, e), so an interrupted run resumed from a checkpoint walks the exact
same batches and reproduces the uninterrupted trajectory bitwise (f64,
single-threaded). Checkpoints hold parameters, optimizer state, counters,
and the resolved config; everything rides the TSR1 format.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass

import numpy as np

from .config import load_config, model_config, write_resolved
from .data import LabeledScene, read_dataset, splitmix64
from .errors import ConfigError, DataError, NumericError
from .metrics import IoUReport, evaluate_pairs
from .model import Adam, TeethSegModel, predict, train_step
from .tensor import Tensor
from .tsr import load_checkpoint_arrays, save_checkpoint_arrays

TRAIN_LOG_HEADER = "step,L_th,L_fb,L_total,lr,wall_ms"
VAL_LOG_HEADER = "epoch,step,val_miou,fg_iou,bg_iou"

# Keys that must agree between a checkpoint and the config it is used with;
# schedule keys (epochs, max_steps, ...) may differ freely.
MODEL_KEYS = (
    "image_height", "image_width", "image_channels", "patch", "embed_dim",
    "fusion_layers", "msa_blocks", "naive_upscalers", "heads", "encoder_depth",
    "precision", "upscale_mode", "mixer_mode", "use_msa", "use_apk",
    "skip_connections", "gating_residual", "gating_normalize", "seed",
)
TRAIN_KEYS = MODEL_KEYS + ("batch_size", "lr", "lth_over_all_pixels")


def check_compatible(cfg: dict, ckpt_cfg: dict, context: str, keys: tuple = MODEL_KEYS) -> None:
    bad = [k for k in keys if cfg[k] != ckpt_cfg[k]]
    if bad:
        diffs = ", ".join(f"{k}: {cfg[k]!r} vs {ckpt_cfg[k]!r}" for k in bad)
        raise ConfigError(f"{context}: config does not match checkpoint ({diffs})")


@dataclass
class TrainSummary:
    steps: int
    epochs_run: int
    best_val_miou: float
    final_val_miou: float
    out_dir: str
    best_checkpoint: str
    last_checkpoint: str
    train_log: str
    val_log: str
    wall_seconds: float


def build_model(cfg: dict) -> TeethSegModel:
    return TeethSegModel(model_config(cfg), seed=cfg["seed"])


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    rng = np.random.default_rng(splitmix64(seed ^ 0x5EED5EED, epoch))
    return rng.permutation(n)


def evaluate_model(model: TeethSegModel, scenes: list[LabeledScene], per_scene: bool = False) -> IoUReport:
    pairs = []
    for scene in scenes:
        scores = model.forward(Tensor(scene.image))
        pred = predict(scores, scene.labels.shape[0], scene.labels.shape[1])
        pairs.append((pred, scene.labels))
    return evaluate_pairs(pairs, per_scene=per_scene)


def save_checkpoint(path: str, cfg: dict, model: TeethSegModel, optimizer: Adam, meta: dict) -> None:
    arrays = {f"param.{name}": p.data for name, p in model.named_parameters()}
    arrays.update(optimizer.state_arrays())
    arrays.update({f"meta.{k}": np.array(float(v)) for k, v in meta.items()})
    save_checkpoint_arrays(path, arrays)
    write_resolved(cfg, path)


def load_checkpoint(path: str) -> tuple[dict, TeethSegModel, Adam, dict]:
    cfg_path = os.path.join(path, "config_resolved.txt")
    if not os.path.exists(cfg_path):
        raise DataError(f"checkpoint {path} has no resolved config")
    cfg = load_config(cfg_path)
    arrays = load_checkpoint_arrays(path)
    model = build_model(cfg)
    for name, p in model.named_parameters():
        key = f"param.{name}"
        if key not in arrays:
            raise DataError(f"checkpoint {path} missing parameter {name}")
        if arrays[key].shape != p.data.shape:
            raise DataError(f"checkpoint {path}: {name} shape {arrays[key].shape} vs {p.data.shape}")
        p.data = arrays[key].copy()
    optimizer = Adam(dict(model.named_parameters()))
    optimizer.load_state_arrays(arrays)
    meta = {k[len("meta."):]: float(v) for k, v in arrays.items() if k.startswith("meta.")}
    return cfg, model, optimizer, meta


def _dump_diagnostics(out_dir: str, step: int, err: Exception, model: TeethSegModel) -> str:
    path = os.path.join(out_dir, "diagnostic_dump.txt")
    with open(path, "w") as fh:
        fh.write(f"aborted at step {step}: {err}\n")
        for name, p in model.named_parameters():
            data = p.data
            fh.write(
                f"{name}\tshape={data.shape}\t|max|={np.abs(data).max():.6e}\t"
                f"finite={bool(np.isfinite(data).all())}\n"
            )
    return path


def train(
    cfg: dict,
    data_dir: str,
    out_dir: str,
    resume_from: str | None = None,
    train_limit: int = 0,
) -> TrainSummary:
    os.makedirs(out_dir, exist_ok=True)
    write_resolved(cfg, out_dir)

    train_scenes = read_dataset(data_dir, "train")
    val_scenes = read_dataset(data_dir, "val")
    if train_limit:
        train_scenes = train_scenes[:train_limit]

    if resume_from is not None:
        cfg_saved, model, optimizer, meta = load_checkpoint(resume_from)
        check_compatible(cfg, cfg_saved, "resume", keys=TRAIN_KEYS)
        start_epoch = int(meta["epoch"])
        start_batch = int(meta["batch_in_epoch"])
        global_step = int(meta["global_step"])
        best_val = float(meta["best_val_miou"])
    else:
        model = build_model(cfg)
        optimizer = Adam(dict(model.named_parameters()))
        start_epoch, start_batch, global_step, best_val = 0, 0, 0, -1.0

    batch_size = cfg["batch_size"]
    lr = cfg["lr"]
    max_steps = cfg["max_steps"]
    n = len(train_scenes)
    batches_per_epoch = (n + batch_size - 1) // batch_size

    train_log = os.path.join(out_dir, "train_log.csv")
    val_log = os.path.join(out_dir, "val_log.csv")
    mode = "a" if resume_from is not None and os.path.exists(train_log) else "w"
    log_fh = open(train_log, mode)
    val_fh = open(val_log, mode)
    if mode == "w":
        log_fh.write(TRAIN_LOG_HEADER + "\n")
        val_fh.write(VAL_LOG_HEADER + "\n")

    best_path = os.path.join(out_dir, "checkpoint_best")
    last_path = os.path.join(out_dir, "checkpoint_last")
    final_val = best_val
    t_start = time.perf_counter()
    stop = False
    epoch = start_epoch

    def checkpoint(path: str, epoch_: int, batch_: int) -> None:
        save_checkpoint(
            path, cfg, model, optimizer,
            {
                "epoch": epoch_,
                "batch_in_epoch": batch_,
                "global_step": global_step,
                "best_val_miou": best_val,
            },
        )

    try:
        while epoch < cfg["epochs"] and not stop:
            order = epoch_order(cfg["seed"], epoch, n)
            first = start_batch if epoch == start_epoch else 0
            for b in range(first, batches_per_epoch):
                idx = order[b * batch_size:(b + 1) * batch_size]
                batch = [train_scenes[i] for i in idx]
                try:
                    stats = train_step(model, batch, optimizer, lr, cfg["lth_over_all_pixels"])
                except NumericError as err:
                    _dump_diagnostics(out_dir, global_step, err, model)
                    raise
                global_step += 1
                log_fh.write(
                    f"{global_step},{stats.l_th:.10f},{stats.l_fb:.10f},"
                    f"{stats.l_total:.10f},{lr},{stats.wall_ms:.3f}\n"
                )
                if max_steps and global_step >= max_steps:
                    checkpoint(last_path, epoch, b + 1)
                    stop = True
                    break
            if stop:
                break
            epoch += 1
            if cfg["eval_every"] and epoch % cfg["eval_every"] == 0:
                report = evaluate_model(model, val_scenes)
                final_val = report.miou
                val_fh.write(
                    f"{epoch},{global_step},{report.miou:.6f},{report.fg_iou:.6f},{report.bg_iou:.6f}\n"
                )
                val_fh.flush()
                if report.miou > best_val:
                    best_val = report.miou
                    checkpoint(best_path, epoch, 0)
                if cfg["early_stop_miou"] > 0 and report.miou >= cfg["early_stop_miou"]:
                    stop = True
            checkpoint(last_path, epoch, 0)
    finally:
        log_fh.close()
        val_fh.close()

    if not os.path.exists(last_path):
        checkpoint(last_path, epoch, 0)
    if not os.path.exists(best_path):
        checkpoint(best_path, epoch, 0)

    return TrainSummary(
        steps=global_step,
        epochs_run=epoch - start_epoch,
        best_val_miou=best_val,
        final_val_miou=final_val,
        out_dir=out_dir,
        best_checkpoint=best_path,
        last_checkpoint=last_path,
        train_log=train_log,
        val_log=val_log,
        wall_seconds=time.perf_counter() - t_start,
    )
