"""Bi-level routing attention and the transformer block built around it.

The map is split into S x S regions. Region-mean queries and keys form a
region-to-region affinity matrix; each query region keeps its top-k most
affine regions, gathers their key/value tokens, and runs multi-head
scaled-dot-product attention over just that gathered set. A 5x5 depth-wise
convolution of the value map (local context enhancement) is added before
the output projection. Index selection carries no gradient.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .layers import Conv2d, Layer, LayerNorm, Linear, MlpGelu
from .tensor import ConfigError, ShapeError, Tensor

__all__ = [
    "region_partition", "region_merge", "region_affinity", "topk_route",
    "gather_kv", "BilevelRoutingAttention", "TransformerBlock",
]


def region_partition(x: Tensor, s: int) -> Tensor:
    """(H, W, C) -> (S^2, HW/S^2, C), regions and tokens in row-major order."""
    H, W, C = x.shape
    if H % s or W % s:
        raise ShapeError(f"extents ({H}, {W}) not divisible by region count {s}")
    rh, rw = H // s, W // s
    x = T.reshape(x, (s, rh, s, rw, C))
    x = T.transpose(x, (0, 2, 1, 3, 4))
    return T.reshape(x, (s * s, rh * rw, C))


def region_merge(x: Tensor, hw: tuple[int, int], s: int) -> Tensor:
    """Inverse of region_partition."""
    H, W = hw
    rh, rw = H // s, W // s
    x = T.reshape(x, (s, s, rh, rw, x.shape[-1]))
    x = T.transpose(x, (0, 2, 1, 3, 4))
    return T.reshape(x, (H, W, x.shape[-1]))


def region_affinity(q_regions: Tensor, k_regions: Tensor) -> Tensor:
    """Affinity between region-mean queries and keys: Qr @ Kr^T, (S^2, S^2)."""
    qr = T.tmean(q_regions, axis=1)
    kr = T.tmean(k_regions, axis=1)
    return T.matmul(qr, T.transpose(kr, (1, 0)))


def topk_route(affinity: np.ndarray, k: int) -> np.ndarray:
    """Per-row indices of the k largest entries, ties to the lower index.

    Operates on raw values and returns a plain integer matrix: routing is a
    hard selection and contributes no gradient.
    """
    n = affinity.shape[1]
    if not 1 <= k <= n:
        raise ConfigError(f"k={k} outside [1, {n}]")
    return np.argsort(-affinity, axis=1, kind="stable")[:, :k]


def gather_kv(k_regions: Tensor, v_regions: Tensor, index: np.ndarray):
    """Collect each query region's routed tokens.

    (S^2, t, C) tensors gathered through an (S^2, k) index give
    (S^2, k*t, C); gradients scatter back to the source regions with
    multiplicity.
    """
    r, t, c = k_regions.shape
    kk = index.shape[1]
    kg = T.reshape(T.gather_rows(k_regions, index), (r, kk * t, c))
    vg = T.reshape(T.gather_rows(v_regions, index), (r, kk * t, c))
    return kg, vg


def _split_heads(x: Tensor, heads: int) -> Tensor:
    r, t, c = x.shape
    x = T.reshape(x, (r, t, heads, c // heads))
    return T.transpose(x, (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    r, h, t, d = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (r, t, h * d))


class BilevelRoutingAttention(Layer):
    def __init__(self, c: int, heads: int, s: int, k: int,
                 rng: np.random.Generator, dtype=np.float32):
        if c % heads:
            raise ConfigError(f"heads={heads} does not divide channels {c}")
        self.wq = Linear(c, c, rng, dtype)
        self.wk = Linear(c, c, rng, dtype)
        self.wv = Linear(c, c, rng, dtype)
        self.lce = Conv2d(c, c, 5, rng, stride=1, pad=2, groups=c, dtype=dtype)
        self.wo = Linear(c, c, rng, dtype)
        self.heads, self.s, self.k = heads, s, k

    def __call__(self, x: Tensor) -> Tensor:
        H, W, c = x.shape
        s = self.s
        k = min(self.k, s * s)
        q = self.wq(x)
        key = self.wk(x)
        v = self.wv(x)

        qs = region_partition(q, s)
        ks = region_partition(key, s)
        vs = region_partition(v, s)
        affinity = region_affinity(qs, ks)
        index = topk_route(affinity.data, k)
        kg, vg = gather_kv(ks, vs, index)

        d = c // self.heads
        qh = _split_heads(qs, self.heads)
        kh = T.transpose(T.reshape(kg, (s * s, kg.shape[1], self.heads, d)), (0, 2, 3, 1))
        vh = T.transpose(T.reshape(vg, (s * s, vg.shape[1], self.heads, d)), (0, 2, 1, 3))
        scores = T.mul(T.matmul(qh, kh), 1.0 / np.sqrt(d))
        attn = T.softmax(scores, axis=-1)
        out = _merge_heads(T.matmul(attn, vh))

        out = region_merge(out, (H, W), s)
        return self.wo(T.add(out, self.lce(v)))


class TransformerBlock(Layer):
    """Depth-wise positional residual, routed attention, then the MLP,
    with pre-norm residuals on the latter two."""

    def __init__(self, c: int, heads: int, s: int, k: int, expansion: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.pos = Conv2d(c, c, 3, rng, stride=1, pad=1, groups=c, dtype=dtype)
        self.norm1 = LayerNorm(c, dtype)
        self.attn = BilevelRoutingAttention(c, heads, s, k, rng, dtype)
        self.norm2 = LayerNorm(c, dtype)
        self.mlp = MlpGelu(c, expansion, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        x = T.add(x, self.pos(x))
        x = T.add(x, self.attn(self.norm1(x)))
        return T.add(x, self.mlp(self.norm2(x)))
