"""Parameterized layers: patch embedding/merging/expanding, norm, MLP.

Every layer draws its parameters from a caller-supplied numpy Generator at
construction time, so a model built twice from the same seed is bitwise
identical. Linear weights are truncated-normal with fan-in scaling
(std = 1/sqrt(fan_in), cut at 2 std) so activations keep their magnitude
at narrow desk-scale widths; convolution kernels are fan-in uniform,
biases zero.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import ConfigError, ShapeError, Tensor

__all__ = [
    "Layer", "Linear", "Conv2d", "LayerNorm", "MlpGelu",
    "PatchEmbed", "PatchMerge", "PatchExpand",
    "space_to_depth", "depth_to_space",
]

EMBED_CHANNELS = 48  # width of the overlapping embedding stage


def trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def fan_in_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Layer:
    """Base class providing recursive (name, Tensor) parameter enumeration."""

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for attr, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out.append((attr, value))
            elif isinstance(value, Layer):
                out.extend((f"{attr}.{n}", p) for n, p in value.parameters())
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Layer):
                        out.extend((f"{attr}.{i}.{n}", p) for n, p in item.parameters())
        return out

    def param_count(self) -> int:
        return sum(p.data.size for _, p in self.parameters())


class Linear(Layer):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, dtype=np.float32):
        std = 1.0 / np.sqrt(cin)
        self.weight = Tensor(trunc_normal(rng, (cin, cout), std).astype(dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
        self.cin, self.cout = cin, cout

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.cin:
            raise ConfigError(f"linear expects {self.cin} channels, got {x.shape[-1]}")
        return T.add(T.matmul(x, self.weight), self.bias)


class Conv2d(Layer):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator,
                 stride: int = 1, pad: int = 0, groups: int = 1, dtype=np.float32):
        if cin % groups or cout % groups:
            raise ConfigError(f"groups={groups} does not divide channels ({cin}, {cout})")
        fan_in = k * k * (cin // groups)
        self.weight = Tensor(
            fan_in_uniform(rng, (k, k, cin // groups, cout), fan_in).astype(dtype),
            requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
        self.stride, self.pad, self.groups = stride, pad, groups

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias,
                        stride=self.stride, pad=self.pad, groups=self.groups)


class LayerNorm(Layer):
    def __init__(self, c: int, dtype=np.float32, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class MlpGelu(Layer):
    """Linear -> GELU -> Linear with hidden width expansion * C."""

    def __init__(self, c: int, expansion: int, rng: np.random.Generator, dtype=np.float32):
        self.fc1 = Linear(c, expansion * c, rng, dtype)
        self.fc2 = Linear(expansion * c, c, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


def space_to_depth(x: Tensor, factor: int) -> Tensor:
    """(H, W, C) -> (H/f, W/f, f*f*C); window cells ordered row-major."""
    H, W, C = x.shape
    if H % factor or W % factor:
        raise ShapeError(f"extents ({H}, {W}) not divisible by {factor}")
    x = T.reshape(x, (H // factor, factor, W // factor, factor, C))
    x = T.transpose(x, (0, 2, 1, 3, 4))
    return T.reshape(x, (H // factor, W // factor, factor * factor * C))


def depth_to_space(x: Tensor, factor: int) -> Tensor:
    """(H, W, f*f*C) -> (f*H, f*W, C); inverse of space_to_depth."""
    H, W, FC = x.shape
    if FC % (factor * factor):
        raise ConfigError(f"channels {FC} not divisible by {factor}^2")
    C = FC // (factor * factor)
    x = T.reshape(x, (H, W, factor, factor, C))
    x = T.transpose(x, (0, 2, 1, 3, 4))
    return T.reshape(x, (H * factor, W * factor, C))


class PatchEmbed(Layer):
    """Overlapping patch embedding: 7x7 stride-4 conv to 48 channels, then a
    pointwise projection to the requested width. Divides each spatial
    extent by 4."""

    def __init__(self, in_channels: int, c: int, rng: np.random.Generator, dtype=np.float32):
        self.conv = Conv2d(in_channels, EMBED_CHANNELS, 7, rng, stride=4, pad=3, dtype=dtype)
        self.proj = Linear(EMBED_CHANNELS, c, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        H, W, _ = x.shape
        if H % 4 or W % 4:
            raise ShapeError(f"patch embedding requires extents divisible by 4, got ({H}, {W})")
        return self.proj(self.conv(x))


class PatchMerge(Layer):
    """Concatenate 2x2 neighborhoods and project 4C -> 2C (2x downsample)."""

    def __init__(self, c: int, rng: np.random.Generator, dtype=np.float32):
        self.proj = Linear(4 * c, 2 * c, rng, dtype)
        self.c = c

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.c:
            raise ConfigError(f"patch merge expects {self.c} channels, got {x.shape[-1]}")
        return self.proj(space_to_depth(x, 2))


class PatchExpand(Layer):
    """Project to factor^2 * C_out channels and pixel-shuffle up by factor.

    factor 2 halves the channel count; factor 4 (the final upsampling)
    outputs C/4 channels.
    """

    def __init__(self, c: int, factor: int, rng: np.random.Generator, dtype=np.float32):
        if factor not in (2, 4):
            raise ConfigError(f"expand factor must be 2 or 4, got {factor}")
        if factor == 2:
            if c % 2:
                raise ConfigError(f"factor-2 expand needs even channels, got {c}")
            self.cout = c // 2
        else:
            if c % 4:
                raise ConfigError(f"factor-4 expand needs channels divisible by 4, got {c}")
            self.cout = c // 4
        self.proj = Linear(c, factor * factor * self.cout, rng, dtype)
        self.factor = factor

    def __call__(self, x: Tensor) -> Tensor:
        return depth_to_space(self.proj(x), self.factor)
