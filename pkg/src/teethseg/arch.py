"""Multi-scale aggregation blocks and the prior-knowledge layer.

Each MSA block cross-gates the class tokens against the current visual grid,
then doubles the grid's spatial extent with a linear upscaler plus a bilinear
skip taken from the block's own input. The prior-knowledge layer encodes
three clinical rules over the 16 tooth classes: emphasize foreground
semantics in tooth tokens (cross-gate against the fg/bg tokens), then let
each tooth token interact only with its arch neighbors and its mirror-image
partner (masked self-gate). Both layers can swap gating for standard
attention to serve the ablation matrix.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .gating import GatingLayer, cross_gate, self_gate
from .layers import AttentionLayer, AttentionMask, LinearLayer, TokenGrid, masked_attention
from .tensor import Module, Tensor
from .upscale import bilinear_upsample, linear_upscale

# Left-to-right arch order: right third molar to right central incisor, then
# left central incisor to left third molar. Midline sits between T1 and T9;
# the contralateral partner of Ti is Ti+8 (and vice versa).
ARCH_SEQUENCE: tuple[int, ...] = (8, 7, 6, 5, 4, 3, 2, 1, 9, 10, 11, 12, 13, 14, 15, 16)

N_TOOTH_CLASSES = 16


def contralateral(tooth: int) -> int:
    """Mirror partner of a 1-based tooth class: Ti <-> Ti+8."""
    return tooth + 8 if tooth <= 8 else tooth - 8


class ApkMask:
    """16x16 allowed-interaction matrix: self, arch-adjacent, contralateral."""

    def __init__(self, allowed: np.ndarray, order: tuple[int, ...]):
        self.allowed = np.asarray(allowed, dtype=bool)
        self.order = order
        self.attention = AttentionMask(self.allowed)

    def to_text_grid(self) -> str:
        """16 lines of space-separated 0/1, row i = tooth class i+1."""
        return "\n".join(" ".join("1" if v else "0" for v in row) for row in self.allowed)


def build_apk_mask(order: tuple[int, ...] = ARCH_SEQUENCE) -> ApkMask:
    """Derive the interaction mask from an arch linearization.

    allowed(i, j) iff i == j, or Ti and Tj are neighbors in the arch
    sequence, or they are contralateral partners. Symmetric by construction.
    """
    if sorted(order) != list(range(1, N_TOOTH_CLASSES + 1)):
        raise ConfigError(f"arch order must be a permutation of 1..16, got {order}")
    pos = {tooth: i for i, tooth in enumerate(order)}
    allowed = np.zeros((N_TOOTH_CLASSES, N_TOOTH_CLASSES), dtype=bool)
    for ti in range(1, N_TOOTH_CLASSES + 1):
        for tj in range(1, N_TOOTH_CLASSES + 1):
            ok = ti == tj or abs(pos[ti] - pos[tj]) == 1 or contralateral(ti) == tj
            allowed[ti - 1, tj - 1] = ok
    return ApkMask(allowed, tuple(order))


class MsaBlock(Module):
    """One aggregation stage: class-token update + spatial doubling.

    mixer: "gating" (default), "attention" (ablation swap), or None (class
    tokens pass through untouched). upscale: "permute" keeps width via the
    linear upscaler, "bilinear" interpolates at constant width. skip adds a
    bilinear resample of the block's input grid to the permute path.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        width: int,
        heads: int,
        mixer: str | None = "gating",
        upscale: str = "permute",
        skip: bool = True,
        residual: bool = True,
        normalize_gate: bool = False,
    ):
        if upscale not in ("permute", "bilinear"):
            raise ConfigError(f"unknown upscale mode {upscale!r}")
        self.mixer = mixer
        self.upscale = upscale
        self.skip = skip
        self.residual = residual
        if mixer == "gating":
            self.gate = GatingLayer(rng, width, heads, normalize=normalize_gate)
        elif mixer == "attention":
            self.attn = AttentionLayer(rng, width, heads)
        elif mixer is not None:
            raise ConfigError(f"unknown mixer mode {mixer!r}")
        if upscale == "permute":
            if width % 4 != 0:
                raise ConfigError(f"permute upscaling needs width divisible by 4, got {width}")
            self.up_proj = LinearLayer(rng, width // 4, width)

    def __call__(self, grid: TokenGrid, cls_tokens: Tensor) -> tuple[TokenGrid, Tensor]:
        if cls_tokens.shape[1] != grid.d:
            raise DimensionError(f"class width {cls_tokens.shape[1]} vs grid width {grid.d}")
        if self.mixer == "gating":
            update = cross_gate(grid.tokens, cls_tokens, self.gate)
        elif self.mixer == "attention":
            update = masked_attention(self.attn, cls_tokens, grid.tokens)
        else:
            update = None
        if update is not None:
            cls_tokens = T.add(cls_tokens, update) if self.residual else update

        if self.upscale == "permute":
            new_grid = linear_upscale(grid, self.up_proj)
            if self.skip:
                skip = bilinear_upsample(grid, new_grid.h, new_grid.w)
                new_grid = TokenGrid(T.add(new_grid.tokens, skip.tokens), new_grid.h, new_grid.w)
        else:
            # The interpolation baseline: main path and skip coincide.
            new_grid = bilinear_upsample(grid, 2 * grid.h, 2 * grid.w)
        return new_grid, cls_tokens


class ApkLayer(Module):
    """Tooth-token refinement under the three prior rules.

    Step 1: tooth tokens cross-gated against the fg/bg tokens (residual).
    Step 2: masked self-gate restricted to adjacent/contralateral pairs
    (residual). Only tooth tokens are processed or returned.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        width: int,
        heads: int,
        mask: ApkMask,
        mixer: str = "gating",
        residual: bool = True,
        normalize_gate: bool = False,
    ):
        self.mask = mask
        self.mixer = mixer
        self.residual = residual
        if mixer == "gating":
            self.cross = GatingLayer(rng, width, heads, normalize=normalize_gate)
            self.self_g = GatingLayer(rng, width, heads, normalize=normalize_gate)
        elif mixer == "attention":
            self.cross = AttentionLayer(rng, width, heads)
            self.self_g = AttentionLayer(rng, width, heads)
        else:
            raise ConfigError(f"unknown mixer mode {mixer!r}")

    def __call__(self, cls_fb: Tensor, cls_th: Tensor) -> Tensor:
        if self.mixer == "gating":
            step1 = cross_gate(cls_fb, cls_th, self.cross)
        else:
            step1 = masked_attention(self.cross, cls_th, cls_fb)
        th = T.add(cls_th, step1) if self.residual else step1
        if self.mixer == "gating":
            step2 = self_gate(th, self.self_g, self.mask.attention)
        else:
            step2 = masked_attention(self.self_g, th, th, self.mask.attention)
        return T.add(th, step2) if self.residual else step2
