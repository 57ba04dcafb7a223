"""Token-grid upscalers.

The permutation upscaler turns one width-d token into a 2x2 block of
width-d/4 tokens by splitting its embedding row-major (chunk 0 -> top-left,
1 -> top-right, 2 -> bottom-left, 3 -> bottom-right): pure data movement, so
spatial detail survives instead of being smeared by interpolation. The
linear upscaler restores width d afterwards with a learned projection. The
bilinear resampler (align-corners=false) backs skip connections and the
interpolation ablation baseline.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .layers import LinearLayer, TokenGrid
from .tensor import Tensor, record_op


def naive_upscale(g: TokenGrid) -> TokenGrid:
    """(h x w, d) -> (2h x 2w, d/4) by chunk permutation; element count is conserved."""
    if g.d % 4 != 0:
        raise ConfigError(f"permutation upscale needs width divisible by 4, got {g.d}")
    d4 = g.d // 4
    x = T.reshape(g.tokens, (g.h, g.w, 2, 2, d4))
    x = T.permute_axes(x, (0, 2, 1, 3, 4))
    return TokenGrid(T.reshape(x, (4 * g.h * g.w, d4)), 2 * g.h, 2 * g.w)


def naive_downscale(g: TokenGrid) -> TokenGrid:
    """Exact inverse of naive_upscale: (2h x 2w, d) -> (h x w, 4d)."""
    if g.h % 2 != 0 or g.w % 2 != 0:
        raise ConfigError(f"downscale needs even spatial extents, got {g.h}x{g.w}")
    h, w = g.h // 2, g.w // 2
    x = T.reshape(g.tokens, (h, 2, w, 2, g.d))
    x = T.permute_axes(x, (0, 2, 1, 3, 4))
    return TokenGrid(T.reshape(x, (h * w, 4 * g.d)), h, w)


def linear_upscale(g: TokenGrid, proj: LinearLayer) -> TokenGrid:
    """naive_upscale followed by a learned d/4 -> d projection per token."""
    up = naive_upscale(g)
    return TokenGrid(proj(up.tokens), up.h, up.w)


def _interp_coords(n_in: int, n_out: int, dtype) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # align-corners=false source coordinates, clamped at the borders
    src = (np.arange(n_out, dtype=dtype) + 0.5) * (n_in / n_out) - 0.5
    lo = np.floor(src).astype(np.int64)
    frac = src - lo
    lo = np.clip(lo, 0, n_in - 1)
    hi = np.clip(lo + 1, 0, n_in - 1)
    return lo, hi, frac


def bilinear_upsample(g: TokenGrid, out_h: int, out_w: int) -> TokenGrid:
    """Per-channel bilinear resampling to (out_h, out_w), align-corners=false.

    Computed in lerp form (v0 + frac*(v1-v0)) so constant fields pass through
    bit-exactly and out==in dimensions is the identity.
    """
    if out_h < g.h or out_w < g.w:
        raise ConfigError(f"bilinear target {out_h}x{out_w} smaller than source {g.h}x{g.w}")
    h, w, d = g.h, g.w, g.d
    tokens = g.tokens
    dtype = tokens.data.dtype
    y0, y1, fy = _interp_coords(h, out_h, dtype)
    x0, x1, fx = _interp_coords(w, out_w, dtype)
    grid = tokens.data.reshape(h, w, d)
    v00 = grid[np.ix_(y0, x0)]
    v01 = grid[np.ix_(y0, x1)]
    v10 = grid[np.ix_(y1, x0)]
    v11 = grid[np.ix_(y1, x1)]
    fxb = fx[None, :, None]
    fyb = fy[:, None, None]
    top = v00 + fxb * (v01 - v00)
    bot = v10 + fxb * (v11 - v10)
    out_data = (top + fyb * (bot - top)).reshape(out_h * out_w, d)

    def backward(gr):
        gr = gr.reshape(out_h, out_w, d)
        gin = np.zeros((h, w, d), dtype=dtype)
        wy1 = fy[:, None, None]
        wy0 = 1.0 - wy1
        wx1 = fx[None, :, None]
        wx0 = 1.0 - wx1
        Y0 = np.broadcast_to(y0[:, None], (out_h, out_w))
        Y1 = np.broadcast_to(y1[:, None], (out_h, out_w))
        X0 = np.broadcast_to(x0[None, :], (out_h, out_w))
        X1 = np.broadcast_to(x1[None, :], (out_h, out_w))
        np.add.at(gin, (Y0, X0), gr * (wy0 * wx0))
        np.add.at(gin, (Y0, X1), gr * (wy0 * wx1))
        np.add.at(gin, (Y1, X0), gr * (wy1 * wx0))
        np.add.at(gin, (Y1, X1), gr * (wy1 * wx1))
        T._accum(tokens, gin.reshape(h * w, d), owned=True)

    out = record_op("bilinear", out_data, (tokens,), backward)
    return TokenGrid(out, out_h, out_w)
