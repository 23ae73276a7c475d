"""U-shaped transformer: three encoder levels, a two-block bottleneck, and
a mirrored decoder whose levels are enhanced by skip connections.

Shape pipeline for input (W, W, 4) with base width C:

    embed   -> block        X1e  (W/4,  C)
    merge   -> block        X2e  (W/8,  2C)
    merge   -> block        X3e  (W/16, 4C)
    merge   -> block, block Xh   (W/32, 8C)
    expand  -> skip -> block     (W/16, 4C)
    expand  -> skip -> block     (W/8,  2C)
    expand  -> skip -> block     (W/4,  C)    = fused level-1 feature
    expand x4 -> classifier      (W,    K)    = logits

The region count S and the per-depth top-k route widths are clipped to
whatever the grid at each stage supports.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import TransformerBlock
from .layers import Layer, Linear, PatchEmbed, PatchExpand, PatchMerge
from .skip import ConcatSkip, ReverseDifferenceSkip
from .tensor import ConfigError, Tensor

__all__ = ["ModelConfig", "ForwardArtifacts", "SegmentationNet"]

SKIP_MODES = ("difference", "concat", "none")


@dataclass
class ModelConfig:
    size: int = 64            # input W = H, a power of two >= 32
    channels: int = 16        # base width C; levels use C, 2C, 4C, 8C
    classes: int = 4
    regions: int = 4          # S, clipped per stage to the grid extent
    topk: tuple[int, int, int, int] = (1, 4, 8, 16)  # route width per depth
    heads: int = 2
    expansion: int = 3
    skip: str = "difference"  # difference | concat | none
    dtype: str = "f32"

    def validate(self):
        w = self.size
        if w < 32 or (w & (w - 1)) != 0:
            raise ConfigError(f"size must be a power of two >= 32, got {w}")
        if self.classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.classes}")
        if self.channels % 4:
            raise ConfigError(f"channels must be divisible by 4, got {self.channels}")
        if self.channels % self.heads:
            raise ConfigError(f"heads={self.heads} must divide channels={self.channels}")
        if self.skip not in SKIP_MODES:
            raise ConfigError(f"skip={self.skip!r} not one of {SKIP_MODES}")
        if self.dtype not in ("f32", "f64"):
            raise ConfigError(f"dtype must be f32 or f64, got {self.dtype!r}")
        if self.regions < 1:
            raise ConfigError("regions must be >= 1")
        return self

    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64

    def stage_regions(self, grid: int) -> int:
        return min(self.regions, grid)

    def stage_topk(self, depth: int, grid: int) -> int:
        s = self.stage_regions(grid)
        return min(self.topk[depth], s * s)


@dataclass
class ForwardArtifacts:
    """Everything a loss or a probe needs from one forward pass."""
    logits: Tensor                 # (W, W, K)
    fused_level1: Tensor           # (W/4, W/4, C), input of the variance loss
    encoder_levels: list[Tensor] = field(default_factory=list)
    bottleneck: Tensor | None = None


class SegmentationNet(Layer):
    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        rng = np.random.default_rng(seed)
        dt = config.np_dtype()
        c = config.channels
        w = config.size
        grids = [w // 4, w // 8, w // 16, w // 32]
        widths = [c, 2 * c, 4 * c, 8 * c]

        def block(depth):
            g = grids[depth]
            return TransformerBlock(widths[depth], config.heads,
                                    config.stage_regions(g),
                                    config.stage_topk(depth, g),
                                    config.expansion, rng, dt)

        self.embed = PatchEmbed(4, c, rng, dt)
        self.enc1 = block(0)
        self.merge1 = PatchMerge(c, rng, dt)
        self.enc2 = block(1)
        self.merge2 = PatchMerge(2 * c, rng, dt)
        self.enc3 = block(2)
        self.merge3 = PatchMerge(4 * c, rng, dt)
        self.bottleneck = [block(3), block(3)]

        if config.skip == "difference":
            self.skips = [ReverseDifferenceSkip(8 * c, widths[i], rng, dt) for i in range(3)]
        elif config.skip == "concat":
            self.skips = [ConcatSkip(widths[i], rng, dt) for i in range(3)]
        else:
            self.skips = []

        self.expand3 = PatchExpand(8 * c, 2, rng, dt)
        self.dec3 = block(2)
        self.expand2 = PatchExpand(4 * c, 2, rng, dt)
        self.dec2 = block(1)
        self.expand1 = PatchExpand(2 * c, 2, rng, dt)
        self.dec1 = block(0)
        self.expand_out = PatchExpand(c, 4, rng, dt)
        self.classifier = Linear(c // 4, config.classes, rng, dt)

    # -- forward ------------------------------------------------------------

    def encode(self, x: Tensor) -> list[Tensor]:
        w = self.config.size
        if x.shape != (w, w, 4):
            raise ConfigError(f"expected input ({w}, {w}, 4), got {x.shape}")
        x1 = self.enc1(self.embed(x))
        x2 = self.enc2(self.merge1(x1))
        x3 = self.enc3(self.merge2(x2))
        xh = self.merge3(x3)
        for blk in self.bottleneck:
            xh = blk(xh)
        return [x1, x2, x3, xh]

    def _skip(self, level: int, xh: Tensor, xe: Tensor, xd: Tensor) -> Tensor:
        if not self.skips:
            return xd
        return self.skips[level](xh, xe, xd)

    def decode(self, levels: list[Tensor]) -> tuple[Tensor, Tensor]:
        x1, x2, x3, xh = levels
        d3 = self._skip(2, xh, x3, self.expand3(xh))
        t = self.dec3(d3)
        d2 = self._skip(1, xh, x2, self.expand2(t))
        t = self.dec2(d2)
        d1 = self._skip(0, xh, x1, self.expand1(t))
        fused = d1
        t = self.dec1(fused)
        logits = self.classifier(self.expand_out(t))
        return logits, fused

    def __call__(self, x: Tensor) -> ForwardArtifacts:
        levels = self.encode(x)
        logits, fused = self.decode(levels)
        return ForwardArtifacts(logits=logits, fused_level1=fused,
                                encoder_levels=levels[:3], bottleneck=levels[3])

    # -- parameter I/O --------------------------------------------------------

    def state(self) -> list[tuple[str, np.ndarray]]:
        return [(name, p.data) for name, p in self.parameters()]

    def load_state(self, blobs: dict[str, np.ndarray]):
        params = dict(self.parameters())
        if set(blobs) != set(params):
            missing = set(params) - set(blobs)
            extra = set(blobs) - set(params)
            raise T.ContractError(f"checkpoint/model mismatch: missing {sorted(missing)[:3]}, "
                                  f"unexpected {sorted(extra)[:3]}")
        for name, p in params.items():
            flat = blobs[name]
            if flat.size != p.data.size:
                raise T.ContractError(f"parameter {name}: size {flat.size} != {p.data.size}")
            p.data[...] = flat.reshape(p.data.shape).astype(p.data.dtype)
