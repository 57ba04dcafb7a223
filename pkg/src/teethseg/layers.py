"""Transformer building blocks: linear layers, masked multi-head attention,
pre-norm blocks, the tiny trainable patch encoder, and the shallow-fusion
transformer that lets visual tokens update class tokens (and nothing else
update them, so per-class embeddings stay mutually independent).
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Module, Tensor


class TokenGrid:
    """Token sequence (h*w, d) with row-major spatial meaning: index = row*w + col."""

    __slots__ = ("tokens", "h", "w")

    def __init__(self, tokens: Tensor, h: int, w: int):
        if tokens.ndim != 2 or tokens.shape[0] != h * w:
            raise DimensionError(f"TokenGrid: {tokens.shape} does not hold {h}x{w} tokens")
        self.tokens = tokens
        self.h = h
        self.w = w

    @property
    def d(self) -> int:
        return self.tokens.shape[1]


class AttentionMask:
    """Additive mask over (query, key) pairs: 0 where allowed, -inf where blocked.

    The boolean ``allowed`` matrix is kept alongside so gating layers (which
    exclude blocked keys by zeroing, not by -inf) can reuse the same object.
    """

    def __init__(self, allowed: np.ndarray):
        allowed = np.asarray(allowed, dtype=bool)
        if allowed.ndim != 2:
            raise DimensionError(f"mask must be a matrix, got shape {allowed.shape}")
        if not allowed.any(axis=1).all():
            rows = np.where(~allowed.any(axis=1))[0]
            raise ContractError(f"mask blocks every key for query rows {rows.tolist()}")
        self.allowed = allowed
        additive = np.where(allowed, 0.0, -np.inf)
        self.additive = Tensor(additive)
        self.keep = Tensor(allowed.astype(T.default_dtype()))

    @property
    def shape(self) -> tuple[int, int]:
        return self.allowed.shape


class LinearLayer(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, std: float = 0.02, bias: bool = True):
        self.weight = T.param(rng, (d_in, d_out), std=std)
        if bias:
            self.bias = T.param(rng, (d_out,), std=0.0)

    def __call__(self, x: Tensor) -> Tensor:
        out = T.matmul(x, self.weight)
        if hasattr(self, "bias"):
            out = T.add_bias(out, self.bias)
        return out


class LayerNormParams(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = Tensor(np.ones(d, dtype=T.default_dtype()), requires_grad=True)
        self.bias = Tensor(np.zeros(d, dtype=T.default_dtype()), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, eps=self.eps)


class AttentionLayer(Module):
    """Projection bundle for scaled dot-product attention."""

    def __init__(self, rng: np.random.Generator, width: int, heads: int):
        if width % heads != 0:
            raise ConfigError(f"head count {heads} must divide width {width}")
        self.wq = LinearLayer(rng, width, width)
        # No key bias: softmax shift-invariance makes it exactly inert.
        self.wk = LinearLayer(rng, width, width, bias=False)
        self.wv = LinearLayer(rng, width, width)
        self.wo = LinearLayer(rng, width, width)
        self.heads = heads
        self.head_dim = width // heads


def masked_attention(
    layer: AttentionLayer,
    q_tokens: Tensor,
    k_tokens: Tensor,
    mask: AttentionMask | None = None,
) -> Tensor:
    """Multi-head attention with an optional additive mask applied pre-softmax.

    Values come from k_tokens; head outputs are concatenated and projected.
    """
    if q_tokens.shape[1] != k_tokens.shape[1]:
        raise DimensionError(f"attention widths differ: {q_tokens.shape} vs {k_tokens.shape}")
    if mask is not None and mask.shape != (q_tokens.shape[0], k_tokens.shape[0]):
        raise DimensionError(
            f"mask shape {mask.shape} vs {q_tokens.shape[0]} queries x {k_tokens.shape[0]} keys"
        )
    q = layer.wq(q_tokens)
    k = layer.wk(k_tokens)
    v = layer.wv(k_tokens)
    dh = layer.head_dim
    outs = []
    for h in range(layer.heads):
        qh = T.narrow(q, 1, h * dh, dh)
        kh = T.narrow(k, 1, h * dh, dh)
        vh = T.narrow(v, 1, h * dh, dh)
        scores = T.scale(T.matmul(qh, T.transpose(kh)), 1.0 / math.sqrt(dh))
        if mask is not None:
            scores = T.add(scores, mask.additive)
        outs.append(T.matmul(T.softmax(scores, axis=1), vh))
    return layer.wo(T.concat(outs, axis=1))


class TransformerBlock(Module):
    """Pre-norm block: attention then a 4x GELU feed-forward, both residual."""

    def __init__(self, rng: np.random.Generator, width: int, heads: int):
        self.ln1 = LayerNormParams(width)
        self.attn = AttentionLayer(rng, width, heads)
        self.ln2 = LayerNormParams(width)
        self.ffn_in = LinearLayer(rng, width, 4 * width)
        self.ffn_out = LinearLayer(rng, 4 * width, width)

    def __call__(self, tokens: Tensor, mask: AttentionMask | None = None) -> Tensor:
        normed = self.ln1(tokens)
        tokens = T.add(tokens, masked_attention(self.attn, normed, normed, mask))
        hidden = T.gelu(self.ffn_in(self.ln2(tokens)))
        return T.add(tokens, self.ffn_out(hidden))


class PatchEncoder(Module):
    """Tiny trainable stand-in for a pretrained backbone: linear patch
    projection + learned positional embeddings + ``depth`` transformer blocks.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        image_h: int,
        image_w: int,
        channels: int,
        patch: int,
        width: int,
        depth: int,
        heads: int,
    ):
        if image_h % patch != 0 or image_w % patch != 0:
            raise ConfigError(f"patch {patch} must divide image {image_h}x{image_w}")
        self.h = image_h // patch
        self.w = image_w // patch
        self.patch = patch
        self.channels = channels
        self.proj = LinearLayer(rng, patch * patch * channels, width)
        self.pos = T.param(rng, (self.h * self.w, width))
        self.blocks = [TransformerBlock(rng, width, heads) for _ in range(depth)]

    def __call__(self, image: Tensor) -> TokenGrid:
        H, W = self.h * self.patch, self.w * self.patch
        if image.shape != (H, W, self.channels):
            raise DimensionError(f"image shape {image.shape}, expected {(H, W, self.channels)}")
        p = self.patch
        x = T.reshape(image, (self.h, p, self.w, p, self.channels))
        x = T.permute_axes(x, (0, 2, 1, 3, 4))
        patches = T.reshape(x, (self.h * self.w, p * p * self.channels))
        tokens = T.add(self.proj(patches), self.pos)
        for blk in self.blocks:
            tokens = blk(tokens)
        return TokenGrid(tokens, self.h, self.w)


def fusion_mask(n_cls: int, n_visual: int) -> AttentionMask:
    """Keys are visual tokens only: visual rows attend among themselves and
    class rows are updated exclusively by visual tokens. Class-to-class
    attention (including self) is blocked so per-class embeddings cannot
    drift toward each other; class tokens still evolve through residual
    and feed-forward paths.
    """
    n = n_cls + n_visual
    allowed = np.zeros((n, n), dtype=bool)
    allowed[:, n_cls:] = True
    return AttentionMask(allowed)


class FusionTransformer(Module):
    """M masked blocks fusing a visual grid with learnable class tokens."""

    def __init__(self, rng: np.random.Generator, width: int, heads: int, layers: int):
        if layers < 1:
            raise ConfigError(f"fusion transformer needs at least 1 layer, got {layers}")
        self.blocks = [TransformerBlock(rng, width, heads) for _ in range(layers)]
        self._mask_cache: dict[tuple[int, int], AttentionMask] = {}

    def __call__(self, grid: TokenGrid, cls_tokens: Tensor) -> tuple[TokenGrid, Tensor]:
        if cls_tokens.shape[1] != grid.d:
            raise DimensionError(f"class width {cls_tokens.shape} vs grid width {grid.d}")
        n_cls = cls_tokens.shape[0]
        n_vis = grid.h * grid.w
        key = (n_cls, n_vis)
        if key not in self._mask_cache:
            self._mask_cache[key] = fusion_mask(n_cls, n_vis)
        mask = self._mask_cache[key]
        tokens = T.concat([cls_tokens, grid.tokens], axis=0)
        for blk in self.blocks:
            tokens = blk(tokens, mask)
        cls_out = T.narrow(tokens, 0, 0, n_cls)
        vis_out = T.narrow(tokens, 0, n_cls, n_vis)
        return TokenGrid(vis_out, grid.h, grid.w), cls_out
