"""Multi-head cross/self-gating.

Each token of T earns a scalar importance: the sum over V's tokens of the
cosine similarity between projected T (queries) and projected V (keys),
computed per head over an equal channel split. The token's projected value
row is then scaled by that scalar, so every output row stays colinear with
its own value row: tokens are excited or depressed, never mixed. Blocked
(query, key) pairs contribute zero to the sum (there is no softmax here, so
exclusion-by-zero, not -inf). No output projection and no internal residual;
call sites add residuals.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .layers import AttentionMask, LinearLayer
from .tensor import Module, Tensor

COSINE_NORM_FLOOR = 1e-8


class GatingLayer(Module):
    """Key/query/value projection bundle for gating.

    normalize=True divides each importance by its count of unmasked keys;
    the default keeps the plain sum.
    """

    def __init__(self, rng: np.random.Generator, width: int, heads: int, normalize: bool = False):
        if width % heads != 0:
            raise ConfigError(f"head count {heads} must divide width {width}")
        self.wk = LinearLayer(rng, width, width)
        self.wq = LinearLayer(rng, width, width)
        self.wv = LinearLayer(rng, width, width)
        self.heads = heads
        self.head_dim = width // heads
        self.normalize = normalize


def _row_norms(x: Tensor) -> Tensor:
    return T.clamp_min(T.sqrt(T.sum_axis(T.mul(x, x), axis=1)), COSINE_NORM_FLOOR)


def cosine_matrix(q: Tensor, k: Tensor) -> Tensor:
    """Pairwise cosines (L, K) with the norm floor applied to both sides."""
    dots = T.matmul(q, T.transpose(k))
    L, K = q.shape[0], k.shape[0]
    denom = T.matmul(T.reshape(_row_norms(q), (L, 1)), T.reshape(_row_norms(k), (1, K)))
    return T.div(dots, denom)


def cross_gate(
    V: Tensor,
    Tt: Tensor,
    layer: GatingLayer,
    mask: AttentionMask | None = None,
) -> Tensor:
    """Gate T (L, d) by summed cosine similarity against V (K, d)."""
    if V.shape[0] == 0 or Tt.shape[0] == 0:
        raise ContractError("gating needs at least one key token and one query token")
    if V.shape[1] != Tt.shape[1]:
        raise DimensionError(f"gating widths differ: V {V.shape} vs T {Tt.shape}")
    if mask is not None and mask.shape != (Tt.shape[0], V.shape[0]):
        raise DimensionError(f"mask shape {mask.shape}, expected {(Tt.shape[0], V.shape[0])}")
    keys = layer.wk(V)
    querys = layer.wq(Tt)
    values = layer.wv(Tt)
    dh = layer.head_dim
    if layer.normalize:
        counts = mask.allowed.sum(axis=1) if mask is not None else np.full(Tt.shape[0], V.shape[0])
        inv_counts = Tensor(1.0 / counts.astype(T.default_dtype()))
    outs = []
    for h in range(layer.heads):
        qh = T.narrow(querys, 1, h * dh, dh)
        kh = T.narrow(keys, 1, h * dh, dh)
        vh = T.narrow(values, 1, h * dh, dh)
        sim = cosine_matrix(qh, kh)
        if mask is not None:
            sim = T.mul(sim, mask.keep)
        importance = T.sum_axis(sim, axis=1)
        if layer.normalize:
            importance = T.mul(importance, inv_counts)
        outs.append(T.gated_scale(vh, importance))
    return T.concat(outs, axis=1)


def self_gate(Tt: Tensor, layer: GatingLayer, mask: AttentionMask) -> Tensor:
    """cross_gate with V = T and the mask applied to the similarity matrix."""
    if mask.shape != (Tt.shape[0], Tt.shape[0]):
        raise DimensionError(f"self-gate mask shape {mask.shape}, expected square {Tt.shape[0]}")
    return cross_gate(Tt, Tt, layer, mask)
