"""Reverse-difference skip connections.

The bottleneck feature is aligned to an encoder level twice — once by
cosine channel mixing, once by a learned pointwise convolution — and the
sigmoid-space differences against the encoder feature are concatenated and
rectified. What survives is the spatial detail the deep path lost; the
result is fused into the decoder with a channel-compressing linear.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .layers import Conv2d, Layer, Linear
from .tensor import ShapeError, Tensor

__all__ = ["cosine_align", "NeuralAlign", "reverse_difference", "FuseSkip",
           "ReverseDifferenceSkip", "ConcatSkip"]


def cosine_align(xh: Tensor, xe: Tensor) -> Tensor:
    """Mix the channels of (upsampled) ``xh`` into the channel layout of ``xe``.

    Each target channel's mixing weights are the softmax of its cosine
    similarities against every source channel, so the output is a convex
    combination of source channels, spatially bilinear-upsampled.
    """
    hi, wi, ce = xe.shape
    up = T.upsample_bilinear(xh, (hi, wi))
    ch = up.shape[-1]
    uf = T.reshape(up, (hi * wi, ch))
    ef = T.reshape(xe, (hi * wi, ce))
    weights = T.softmax(T.cosine_similarity_matrix(ef, uf), axis=1)
    out = T.matmul(uf, T.transpose(weights, (1, 0)))
    return T.reshape(out, (hi, wi, ce))


class NeuralAlign(Layer):
    """Learned counterpart of cosine_align: bilinear upsample, then a
    pointwise projection with GELU."""

    def __init__(self, c_high: int, c_target: int, rng: np.random.Generator,
                 dtype=np.float32):
        self.proj = Conv2d(c_high, c_target, 1, rng, dtype=dtype)

    def __call__(self, xh: Tensor, out_hw: tuple[int, int]) -> Tensor:
        return T.gelu(self.proj(T.upsample_bilinear(xh, out_hw)))


def reverse_difference(xe: Tensor, x_cos: Tensor, x_neu: Tensor) -> Tensor:
    """ReLU(Cat(S(xe) - S(x_cos), S(xe) - S(x_neu))) with S the sigmoid.

    Output has 2C channels, every element in [0, 1).
    """
    if not (xe.shape == x_cos.shape == x_neu.shape):
        raise ShapeError(f"aligned maps {x_cos.shape}/{x_neu.shape} must match "
                         f"encoder level {xe.shape}")
    se = T.sigmoid(xe)
    d_cos = T.sub(se, T.sigmoid(x_cos))
    d_neu = T.sub(se, T.sigmoid(x_neu))
    return T.relu(T.concat([d_cos, d_neu], axis=-1))


class FuseSkip(Layer):
    """Compress Cat(detail, decoder) from 3C back to C."""

    def __init__(self, c: int, rng: np.random.Generator, dtype=np.float32):
        self.proj = Linear(3 * c, c, rng, dtype)
        self.c = c

    def __call__(self, detail: Tensor, xd: Tensor) -> Tensor:
        if detail.shape[-1] != 2 * self.c or xd.shape[-1] != self.c:
            raise ShapeError(f"fuse expects ({2 * self.c}, {self.c}) channels, "
                             f"got ({detail.shape[-1]}, {xd.shape[-1]})")
        if detail.shape[:2] != xd.shape[:2]:
            raise ShapeError(f"fuse spatial extents differ: {detail.shape} vs {xd.shape}")
        return self.proj(T.concat([detail, xd], axis=-1))


class ReverseDifferenceSkip(Layer):
    """One decoder level's skip: align, difference, fuse."""

    def __init__(self, c_high: int, c_target: int, rng: np.random.Generator,
                 dtype=np.float32):
        self.neural = NeuralAlign(c_high, c_target, rng, dtype)
        self.fuse = FuseSkip(c_target, rng, dtype)

    def __call__(self, xh: Tensor, xe: Tensor, xd: Tensor) -> Tensor:
        hw = (xe.shape[0], xe.shape[1])
        detail = reverse_difference(xe, cosine_align(xh, xe), self.neural(xh, hw))
        return self.fuse(detail, xd)


class ConcatSkip(Layer):
    """Plain U-Net style skip: Linear(Cat(encoder, decoder)) -> C."""

    def __init__(self, c_target: int, rng: np.random.Generator, dtype=np.float32):
        self.proj = Linear(2 * c_target, c_target, rng, dtype)

    def __call__(self, xh: Tensor, xe: Tensor, xd: Tensor) -> Tensor:
        return self.proj(T.concat([xe, xd], axis=-1))
