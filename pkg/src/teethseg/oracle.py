"""Brute-force reference implementations, used exclusively by tests.

Everything here is loop-based numpy (f64) and shares no code with the fast
paths: gating re-derived with scalar cosines, the permutation upscaler as an
explicit index formula, losses as direct sums, IoU from confusion counts.
Inputs and outputs are plain arrays.
"""

from __future__ import annotations

import math

import numpy as np


def oracle_linear(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    n, d_in = x.shape
    d_out = w.shape[1]
    out = np.zeros((n, d_out))
    for i in range(n):
        for j in range(d_out):
            acc = b[j]
            for t in range(d_in):
                acc += x[i, t] * w[t, j]
            out[i, j] = acc
    return out


def oracle_cross_gate(
    V: np.ndarray,
    T: np.ndarray,
    wq: np.ndarray, bq: np.ndarray,
    wk: np.ndarray, bk: np.ndarray,
    wv: np.ndarray, bv: np.ndarray,
    heads: int,
    mask: np.ndarray | None = None,
    floor: float = 1e-8,
    normalize: bool = False,
) -> np.ndarray:
    """Summed-cosine gating with explicit per-pair scalar math."""
    K, d = V.shape
    L = T.shape[0]
    dh = d // heads
    keys = oracle_linear(V, wk, bk)
    querys = oracle_linear(T, wq, bq)
    values = oracle_linear(T, wv, bv)
    out = np.zeros((L, d))
    for h in range(heads):
        lo = h * dh
        for l in range(L):
            q = querys[l, lo:lo + dh]
            qn = max(math.sqrt(sum(float(x) * float(x) for x in q)), floor)
            importance = 0.0
            allowed = 0
            for k in range(K):
                if mask is not None and not mask[l, k]:
                    continue
                kv = keys[k, lo:lo + dh]
                kn = max(math.sqrt(sum(float(x) * float(x) for x in kv)), floor)
                dot = sum(float(a) * float(b) for a, b in zip(q, kv))
                importance += dot / (qn * kn)
                allowed += 1
            if normalize and allowed:
                importance /= allowed
            for t in range(dh):
                out[l, lo + t] = importance * values[l, lo + t]
    return out


def oracle_naive_upscale(tokens: np.ndarray, h: int, w: int) -> np.ndarray:
    """out[(2i+r)*2w + 2j+c][t] = in[i*w+j][(2r+c)*(d/4) + t]"""
    d = tokens.shape[1]
    d4 = d // 4
    out = np.zeros((4 * h * w, d4))
    for i in range(h):
        for j in range(w):
            for r in range(2):
                for c in range(2):
                    for t in range(d4):
                        out[(2 * i + r) * 2 * w + 2 * j + c, t] = tokens[i * w + j, (2 * r + c) * d4 + t]
    return out


def oracle_loss(
    score_th: np.ndarray,
    score_fb: np.ndarray,
    labels: np.ndarray,
    lth_over_all_pixels: bool = False,
) -> tuple[float, float, float]:
    """Direct-summation two-part cross entropy from post-softmax scores."""
    labels = labels.reshape(-1)
    n = labels.size
    l_fb = 0.0
    for i in range(n):
        col = 0 if labels[i] > 0 else 1
        l_fb -= math.log(score_fb[i, col])
    l_fb /= n

    l_th = 0.0
    if lth_over_all_pixels:
        for i in range(n):
            if labels[i] > 0:
                l_th -= math.log(score_th[i, labels[i] - 1])
            else:
                for k in range(score_th.shape[1]):
                    l_th -= math.log(score_th[i, k]) / score_th.shape[1]
        l_th /= n
    else:
        n_fg = int((labels > 0).sum())
        for i in range(n):
            if labels[i] > 0:
                l_th -= math.log(score_th[i, labels[i] - 1])
        l_th = l_th / n_fg if n_fg else 0.0
    return l_th, l_fb, l_th + l_fb


def oracle_iou(pred: np.ndarray, gt: np.ndarray, n_classes: int = 16) -> tuple[list, float]:
    """Per-class IoU (None when absent) and their mean, from raw counts."""
    pred = pred.reshape(-1)
    gt = gt.reshape(-1)
    per_class: list[float | None] = []
    for k in range(1, n_classes + 1):
        inter = 0
        union = 0
        for p, g in zip(pred, gt):
            pin = p == k
            gin = g == k
            inter += int(pin and gin)
            union += int(pin or gin)
        per_class.append(inter / union if union else None)
    defined = [v for v in per_class if v is not None]
    return per_class, sum(defined) / len(defined)


def oracle_attention(
    q: np.ndarray, k: np.ndarray, v: np.ndarray, additive_mask: np.ndarray | None = None
) -> np.ndarray:
    """Single-head scaled dot-product attention, direct formula."""
    dh = q.shape[1]
    logits = q @ k.T / math.sqrt(dh)
    if additive_mask is not None:
        logits = logits + additive_mask
    logits = logits - logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=1, keepdims=True)
    return weights @ v
