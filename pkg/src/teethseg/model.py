"""End-to-end segmentation model and its two-part loss.

Pipeline: add the foreground embedding to every tooth token, shallow-fuse
all 18 class tokens with the encoded grid under the visual-keys-only mask,
run the aggregation blocks (grid doubles per block), finish the grid with
permutation upscalers down to width D/4^N_up at full image resolution,
project the class tokens to that final width with one shared learned map,
refine tooth tokens through the prior-knowledge layer, and score every
pixel against the tooth and fg/bg tokens with sqrt(d)-scaled softmax heads.

The resolution contract P == 2^(msa_blocks + naive_upscalers) makes exact
full-resolution output a config invariant; no trailing interpolation.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .arch import ApkLayer, ApkMask, MsaBlock, N_TOOTH_CLASSES, build_apk_mask
from .errors import ConfigError, DataError, DimensionError, NumericError
from .layers import FusionTransformer, LinearLayer, PatchEncoder, TokenGrid
from .tensor import Module, Tape, Tensor
from .upscale import bilinear_upsample, naive_upscale

FG, BG = 0, 1  # row indices within the fg/bg token pair


@dataclass
class ModelConfig:
    height: int = 64
    width: int = 64
    channels: int = 1
    patch: int = 8
    embed_dim: int = 64
    fusion_layers: int = 2
    msa_blocks: int = 2
    naive_upscalers: int = 1
    heads: int = 4
    encoder_depth: int = 4
    precision: str = "f64"
    # Variant toggles (the ablation matrix flips these).
    upscale_mode: str = "permute"  # permute | bilinear
    mixer_mode: str = "gating"  # gating | attention
    use_msa: bool = True
    use_apk: bool = True
    skip_connections: bool = True
    gating_residual: bool = True
    gating_normalize: bool = False

    @property
    def final_dim(self) -> int:
        if self.upscale_mode == "bilinear":
            return self.embed_dim
        return self.embed_dim // 4**self.naive_upscalers

    def validate(self) -> "ModelConfig":
        stages = self.msa_blocks + self.naive_upscalers
        if self.patch != 2**stages:
            raise ConfigError(
                f"patch must equal 2^(msa_blocks + naive_upscalers): "
                f"patch={self.patch}, stages give {2 ** stages}"
            )
        if self.height % self.patch or self.width % self.patch:
            raise ConfigError(f"patch {self.patch} must divide image {self.height}x{self.width}")
        if self.upscale_mode == "permute":
            if self.embed_dim % 4**self.naive_upscalers:
                raise ConfigError(
                    f"embed_dim {self.embed_dim} not divisible by 4^{self.naive_upscalers}"
                )
            if self.embed_dim % 4:
                raise ConfigError(f"embed_dim {self.embed_dim} must be divisible by 4")
        if self.final_dim % self.heads:
            raise ConfigError(f"heads {self.heads} must divide final width {self.final_dim}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"heads {self.heads} must divide embed_dim {self.embed_dim}")
        if self.fusion_layers < 1:
            raise ConfigError("fusion_layers must be >= 1")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.upscale_mode not in ("permute", "bilinear"):
            raise ConfigError(f"unknown upscale_mode {self.upscale_mode!r}")
        if self.mixer_mode not in ("gating", "attention"):
            raise ConfigError(f"unknown mixer_mode {self.mixer_mode!r}")
        return self


@dataclass
class ScoreMaps:
    """Per-pixel class scores; each row of each map sums to 1 (post-softmax).

    Logits are carried alongside when produced by the model so the loss can
    take the numerically stable log-softmax route; hand-built score maps
    (tests) may omit them.
    """

    score_th: Tensor  # (H*W, 16)
    score_fb: Tensor  # (H*W, 2)
    logits_th: Tensor | None = None
    logits_fb: Tensor | None = None


class ClassTokens(Module):
    def __init__(self, rng: np.random.Generator, width: int):
        self.cls_fb = T.param(rng, (2, width))
        self.cls_th = T.param(rng, (N_TOOTH_CLASSES, width))


class TeethSegModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, apk_mask: ApkMask | None = None):
        cfg.validate()
        T.set_default_dtype(cfg.precision)
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.encoder = PatchEncoder(
            rng, cfg.height, cfg.width, cfg.channels, cfg.patch, cfg.embed_dim,
            cfg.encoder_depth, cfg.heads,
        )
        self.cls = ClassTokens(rng, cfg.embed_dim)
        self.fusion = FusionTransformer(rng, cfg.embed_dim, cfg.heads, cfg.fusion_layers)
        self.msa = [
            MsaBlock(
                rng, cfg.embed_dim, cfg.heads,
                mixer=cfg.mixer_mode if cfg.use_msa else None,
                upscale=cfg.upscale_mode,
                skip=cfg.skip_connections,
                residual=cfg.gating_residual,
                normalize_gate=cfg.gating_normalize,
            )
            for _ in range(cfg.msa_blocks)
        ]
        self.cls_proj = LinearLayer(rng, cfg.embed_dim, cfg.final_dim)
        self.apk_mask = apk_mask or build_apk_mask()
        if cfg.use_apk:
            self.apk = ApkLayer(
                rng, cfg.final_dim, cfg.heads, self.apk_mask,
                mixer=cfg.mixer_mode,
                residual=cfg.gating_residual,
                normalize_gate=cfg.gating_normalize,
            )

    def forward(self, image: Tensor) -> ScoreMaps:
        cfg = self.cfg
        fg_row = T.narrow(self.cls.cls_fb, 0, FG, 1)
        cls_th_in = T.add_bias(self.cls.cls_th, T.reshape(fg_row, (cfg.embed_dim,)))
        cls_all = T.concat([self.cls.cls_fb, cls_th_in], axis=0)

        grid = self.encoder(image)
        grid, cls_all = self.fusion(grid, cls_all)
        for block in self.msa:
            grid, cls_all = block(grid, cls_all)
        for _ in range(cfg.naive_upscalers):
            if cfg.upscale_mode == "permute":
                grid = naive_upscale(grid)
            else:
                grid = bilinear_upsample(grid, 2 * grid.h, 2 * grid.w)
        if (grid.h, grid.w) != (cfg.height, cfg.width):
            raise ConfigError(f"grid ended at {grid.h}x{grid.w}, expected {cfg.height}x{cfg.width}")

        cls_proj = self.cls_proj(cls_all)
        fb = T.narrow(cls_proj, 0, 0, 2)
        th = T.narrow(cls_proj, 0, 2, N_TOOTH_CLASSES)
        if cfg.use_apk:
            th = self.apk(fb, th)

        inv_sqrt_d = 1.0 / np.sqrt(cfg.final_dim)
        logits_th = T.scale(T.matmul(grid.tokens, T.transpose(th)), inv_sqrt_d)
        logits_fb = T.scale(T.matmul(grid.tokens, T.transpose(fb)), inv_sqrt_d)
        return ScoreMaps(
            score_th=T.softmax(logits_th, axis=1),
            score_fb=T.softmax(logits_fb, axis=1),
            logits_th=logits_th,
            logits_fb=logits_fb,
        )


def _selected_logp(scores: Tensor, logits: Tensor | None, target: np.ndarray) -> Tensor:
    """Row-wise log probability of the target distribution (rows of one-hots
    or soft targets). Uses log-softmax when logits are available, otherwise
    selects first and logs after, so hand-built one-hot scores stay finite.
    """
    tgt = Tensor(target)
    if logits is not None:
        return T.sum_axis(T.mul(T.log_softmax(logits, axis=1), tgt), axis=1)
    return T.log(T.sum_axis(T.mul(scores, tgt), axis=1))


def loss(
    scores: ScoreMaps,
    labels: np.ndarray,
    lth_over_all_pixels: bool = False,
) -> tuple[Tensor, Tensor, Tensor]:
    """Two-part per-pixel cross entropy over a flat label map in {0..16}.

    L_fb averages over all pixels (label 0 -> background, else foreground).
    L_th averages over foreground pixels only, whose tooth class is defined;
    with lth_over_all_pixels, background pixels enter with a uniform target
    and the average runs over all pixels.
    """
    labels = np.asarray(labels).reshape(-1)
    n = labels.size
    if scores.score_th.shape[0] != n or scores.score_fb.shape[0] != n:
        raise DimensionError(f"scores cover {scores.score_th.shape[0]} pixels, labels {n}")
    if labels.min() < 0 or labels.max() > N_TOOTH_CLASSES:
        raise DataError(f"labels out of range 0..16: [{labels.min()}, {labels.max()}]")

    dt = T.default_dtype()
    fg = labels > 0
    fb_target = np.zeros((n, 2), dtype=dt)
    fb_target[fg, FG] = 1.0
    fb_target[~fg, BG] = 1.0
    logp_fb = _selected_logp(scores.score_fb, scores.logits_fb, fb_target)
    l_fb = T.scale(T.sum_all(logp_fb), -1.0 / n)

    th_target = np.zeros((n, N_TOOTH_CLASSES), dtype=dt)
    th_target[fg, labels[fg] - 1] = 1.0
    if lth_over_all_pixels:
        th_target[~fg, :] = 1.0 / N_TOOTH_CLASSES
        weights = np.full(n, 1.0 / n, dtype=dt)
    else:
        n_fg = int(fg.sum())
        weights = np.where(fg, 1.0 / n_fg if n_fg else 0.0, 0.0).astype(dt)
    logp_th = _selected_logp(scores.score_th, scores.logits_th, th_target)
    l_th = T.neg(T.sum_all(T.mul(logp_th, Tensor(weights))))

    return l_th, l_fb, T.add(l_th, l_fb)


def predict(scores: ScoreMaps, h: int, w: int) -> np.ndarray:
    """Label map: background where the fg/bg head says background, otherwise
    1 + argmax over tooth scores. Ties break toward the lower index.
    """
    fb = np.argmax(scores.score_fb.data, axis=1)
    th = 1 + np.argmax(scores.score_th.data, axis=1)
    out = np.where(fb == BG, 0, th)
    return out.reshape(h, w)


class Adam:
    """Deterministic Adam (beta1=0.9, beta2=0.999, eps=1e-8) over named params."""

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float, grad_scale: float = 1.0) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad * grad_scale
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * (g * g)
            p.data -= lr * (self.m[k] / bias1) / (np.sqrt(self.v[k] / bias2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"adam.t": np.array(float(self.t))}
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["adam.t"])
        for k in self.params:
            self.m[k] = arrays[f"adam.m.{k}"].copy()
            self.v[k] = arrays[f"adam.v.{k}"].copy()


@dataclass
class StepStats:
    l_th: float
    l_fb: float
    l_total: float
    wall_ms: float


def train_step(
    model: TeethSegModel,
    batch: list,
    optimizer: Adam,
    lr: float,
    lth_over_all_pixels: bool = False,
) -> StepStats:
    """One Adam update on the batch-mean loss; scenes run on separate tapes
    with gradients reduced by summation, then scaled by 1/batch.
    """
    t0 = time.perf_counter()
    model.zero_grad()
    sums = np.zeros(3)
    for scene in batch:
        with Tape() as tape:
            scores = model.forward(Tensor(scene.image))
            l_th, l_fb, l_total = loss(scores, scene.labels, lth_over_all_pixels)
            tape.backward(l_total)
        sums += (l_th.item(), l_fb.item(), l_total.item())
    means = sums / len(batch)
    if not np.isfinite(means).all():
        raise NumericError(f"non-finite loss {means[2]!r} in training step")
    optimizer.step(lr, grad_scale=1.0 / len(batch))
    return StepStats(means[0], means[1], means[2], (time.perf_counter() - t0) * 1e3)
