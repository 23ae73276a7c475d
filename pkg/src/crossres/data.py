"""Synthetic cross-resolution world generation, class remapping, raster I/O.

A scene is a Voronoi partition of blob sites into four land-cover classes.
The image is drawn from per-class 4-channel means plus Gaussian texture.
The outdated label raster is derived the way a stale low-resolution
product would be: a fraction of blobs is reassigned first (the world
changed after the product was made), the changed world is majority-voted
over BxB blocks, a fraction of blocks is flipped to a wrong class
(production misclassification), and the block grid is nearest-neighbor
upsampled back to full resolution.

NSRT container (little-endian), 28-byte record header:

    magic 'NSRT' | u8 version=1 | u8 dtype | u8 tag | u8 reserved
    u32 H | u32 W | u32 C | 8 reserved bytes | row-major payload

dtype: 0=u8, 1=f32, 2=f64. tag: 0=image, 1=labels, 2=mask, 3=checkpoint.
Checkpoint files chain records, each prefixed by a u32 name length and the
utf-8 name, under a leading u32 record count.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "DataError", "FormatError", "RasterTensor", "SceneSpec",
    "TARGET_CLASSES", "TARGET_ABBREV", "CLASS_MEANS", "CLASS_PALETTE",
    "NLCD_CLASSES", "CCLC_CLASSES", "ClassMap", "default_class_map",
    "synth_world", "remap_classes", "crop_patches",
    "raster_write", "raster_read", "checkpoint_write", "checkpoint_read",
]


class DataError(ValueError):
    """Input data violates the documented vocabulary or value range."""


class FormatError(RuntimeError):
    """A container file is malformed or truncated."""


# ---------------------------------------------------------------------------
# class vocabulary
# ---------------------------------------------------------------------------

TARGET_CLASSES = ("Impervious Surface", "Low vegetation", "Tree canopy", "Water")
TARGET_ABBREV = ("I.S.", "L.V.", "T.C.", "W.")

# 16-class source product vocabulary and its merge into the four targets
NLCD_CLASSES = (
    "Open Water", "Perennial Ice/Snow",
    "Developed Open Space", "Developed Low Intensity",
    "Developed Medium Intensity", "Developed High Intensity",
    "Barren Land", "Deciduous Forest", "Evergreen Forest", "Mixed Forest",
    "Shrub/Scrub", "Grassland/Herbaceous", "Pasture/Hay", "Cultivated Crops",
    "Woody Wetlands", "Emergent Herbaceous Wetlands",
)
# 6-class reference vocabulary
CCLC_CLASSES = ("Water", "Tree Canopy", "Low Vegetation", "Barren",
                "Buildings", "Roads")

_NLCD_TO_TARGET = {
    "Open Water": "Water",
    "Perennial Ice/Snow": "Water",
    "Developed Open Space": "Impervious Surface",
    "Developed Low Intensity": "Impervious Surface",
    "Developed Medium Intensity": "Impervious Surface",
    "Developed High Intensity": "Impervious Surface",
    "Barren Land": "Low vegetation",
    "Deciduous Forest": "Tree canopy",
    "Evergreen Forest": "Tree canopy",
    "Mixed Forest": "Tree canopy",
    "Shrub/Scrub": "Low vegetation",
    "Grassland/Herbaceous": "Low vegetation",
    "Pasture/Hay": "Low vegetation",
    "Cultivated Crops": "Low vegetation",
    "Woody Wetlands": "Tree canopy",
    "Emergent Herbaceous Wetlands": "Low vegetation",
}
_CCLC_TO_TARGET = {
    "Water": "Water",
    "Tree Canopy": "Tree canopy",
    "Low Vegetation": "Low vegetation",
    "Barren": "Impervious Surface",
    "Buildings": "Impervious Surface",
    "Roads": "Impervious Surface",
}

# fixed per-class (R, G, B, NIR) means in [0, 1]; texture sigma below
CLASS_MEANS = np.array([
    [0.55, 0.54, 0.52, 0.30],   # impervious: bright gray, low NIR
    [0.38, 0.52, 0.30, 0.62],   # low vegetation: green, medium NIR
    [0.16, 0.34, 0.16, 0.72],   # tree canopy: dark green, high NIR
    [0.08, 0.14, 0.26, 0.04],   # water: dark blue, near-zero NIR
])
TEXTURE_SIGMA = 0.1

# rendering palette for predictions (RGB, u8)
CLASS_PALETTE = np.array([
    [128, 128, 128],
    [152, 230, 138],
    [28, 99, 48],
    [28, 130, 196],
], dtype=np.uint8)


@dataclass
class ClassMap:
    """Total mapping from a named source vocabulary onto the target classes."""
    source_names: tuple[str, ...]
    target_index: dict[str, int]

    def target_of(self, name: str) -> int:
        if name not in self.target_index:
            raise DataError(f"unmapped class {name!r}")
        return self.target_index[name]

    def lookup(self) -> np.ndarray:
        return np.array([self.target_index[n] for n in self.source_names], dtype=np.int64)


def default_class_map(scheme: str) -> ClassMap:
    if scheme == "nlcd":
        names, table = NLCD_CLASSES, _NLCD_TO_TARGET
    elif scheme == "cclc":
        names, table = CCLC_CLASSES, _CCLC_TO_TARGET
    else:
        raise DataError(f"unknown source scheme {scheme!r}")
    return ClassMap(names, {n: TARGET_CLASSES.index(t) for n, t in table.items()})


def remap_classes(labels: np.ndarray, cmap: ClassMap) -> np.ndarray:
    """Relabel a source-indexed raster into the four target classes."""
    labels = np.asarray(labels)
    n = len(cmap.source_names)
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        bad = int(labels.max() if labels.max() >= n else labels.min())
        raise DataError(f"source class index {bad} outside the {n}-class vocabulary")
    return cmap.lookup()[labels]


# ---------------------------------------------------------------------------
# synthetic world
# ---------------------------------------------------------------------------

@dataclass
class SceneSpec:
    size: int = 256
    classes: int = 4
    blobs: int = 48
    rho_mis: float = 0.2     # fraction of LR blocks flipped to a wrong class
    rho_chg: float = 0.1     # fraction of blobs reassigned before LR derivation
    block: int = 8           # LR block edge in pixels
    seed: int = 0

    def validate(self):
        if not (0.0 <= self.rho_mis <= 1.0 and 0.0 <= self.rho_chg <= 1.0):
            raise DataError("noise rates must lie in [0, 1]")
        if self.size % self.block:
            raise DataError(f"block {self.block} does not divide size {self.size}")
        if self.classes != len(TARGET_CLASSES):
            raise DataError(f"scene generator is fixed to {len(TARGET_CLASSES)} classes")
        return self

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("size", "classes", "blobs", "rho_mis", "rho_chg", "block", "seed")}


def _voronoi_labels(sites: np.ndarray, site_class: np.ndarray, size: int) -> np.ndarray:
    ii, jj = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    pts = np.stack([ii.reshape(-1), jj.reshape(-1)], axis=1).astype(np.float64)
    d2 = ((pts[:, None, :] - sites[None, :, :]) ** 2).sum(axis=2)
    return site_class[d2.argmin(axis=1)].reshape(size, size)


def _block_majority(labels: np.ndarray, block: int, classes: int) -> np.ndarray:
    size = labels.shape[0]
    nb = size // block
    onehot = np.zeros((size, size, classes))
    np.put_along_axis(onehot, labels[:, :, None], 1.0, axis=2)
    counts = onehot.reshape(nb, block, nb, block, classes).sum(axis=(1, 3))
    return counts.argmax(axis=2).astype(np.int64)  # ties: lowest class index


def synth_world(spec: SceneSpec, seed: int | None = None):
    """Generate (image f32 (S,S,4), truth labels, outdated labels) for one tile."""
    spec.validate()
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    size, k = spec.size, spec.classes

    sites = rng.uniform(0.0, size, size=(spec.blobs, 2))
    site_class = rng.integers(0, k, size=spec.blobs)
    truth = _voronoi_labels(sites, site_class, size)

    image = CLASS_MEANS[truth].astype(np.float32)
    image = image + rng.normal(0.0, TEXTURE_SIGMA, size=image.shape).astype(np.float32)

    # the world the stale product saw: some blobs had a different class
    past_class = site_class.copy()
    n_changed = int(round(spec.rho_chg * spec.blobs))
    if n_changed:
        changed = rng.choice(spec.blobs, size=n_changed, replace=False)
        past_class[changed] = (past_class[changed] + rng.integers(1, k, size=n_changed)) % k
    past_truth = _voronoi_labels(sites, past_class, size) if n_changed else truth

    blocks = _block_majority(past_truth, spec.block, k)
    flips = rng.random(blocks.shape) < spec.rho_mis
    if flips.any():
        offsets = rng.integers(1, k, size=int(flips.sum()))
        blocks[flips] = (blocks[flips] + offsets) % k
    outdated = blocks.repeat(spec.block, axis=0).repeat(spec.block, axis=1)

    return image, truth.astype(np.uint8), outdated.astype(np.uint8)


def crop_patches(image: np.ndarray, truth: np.ndarray, outdated: np.ndarray,
                 n: int, size: int, seed: int) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """n aligned random crops, identical offsets across all three rasters."""
    h, w = truth.shape
    if size > h or size > w:
        raise DataError(f"patch size {size} exceeds tile extent ({h}, {w})")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        i = int(rng.integers(0, h - size + 1))
        j = int(rng.integers(0, w - size + 1))
        out.append((image[i:i + size, j:j + size].copy(),
                    truth[i:i + size, j:j + size].copy(),
                    outdated[i:i + size, j:j + size].copy()))
    return out


# ---------------------------------------------------------------------------
# NSRT container
# ---------------------------------------------------------------------------

_MAGIC = b"NSRT"
_VERSION = 1
_HEADER = struct.Struct("<4sBBBBIII8s")
_DTYPE_CODE = {np.dtype(np.uint8): 0, np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_CODE_DTYPE = {0: np.dtype(np.uint8), 1: np.dtype(np.float32), 2: np.dtype(np.float64)}
TAGS = ("image", "labels", "mask", "checkpoint")


@dataclass
class RasterTensor:
    data: np.ndarray  # (H, W, C), contiguous
    tag: str = "image"

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise DataError(f"raster must be (H, W, C), got shape {self.data.shape}")
        if arr.dtype not in _DTYPE_CODE:
            raise DataError(f"unsupported raster dtype {arr.dtype}")
        if self.tag not in TAGS:
            raise DataError(f"unknown semantic tag {self.tag!r}")
        self.data = arr


def _pack_record(r: RasterTensor) -> bytes:
    h, w, c = r.data.shape
    header = _HEADER.pack(_MAGIC, _VERSION, _DTYPE_CODE[r.data.dtype],
                          TAGS.index(r.tag), 0, h, w, c, b"\x00" * 8)
    return header + r.data.tobytes()


def _unpack_record(buf: bytes, offset: int) -> tuple[RasterTensor, int]:
    if len(buf) - offset < _HEADER.size:
        raise FormatError("truncated header")
    magic, version, dcode, tag, _, h, w, c, _ = _HEADER.unpack_from(buf, offset)
    if magic != _MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != _VERSION:
        raise FormatError(f"unsupported version {version}")
    if dcode not in _CODE_DTYPE:
        raise FormatError(f"unknown dtype code {dcode}")
    if tag >= len(TAGS):
        raise FormatError(f"unknown tag code {tag}")
    dtype = _CODE_DTYPE[dcode]
    nbytes = h * w * c * dtype.itemsize
    start = offset + _HEADER.size
    if len(buf) - start < nbytes:
        raise FormatError("truncated payload")
    data = np.frombuffer(buf[start:start + nbytes], dtype=dtype).reshape(h, w, c).copy()
    return RasterTensor(data, TAGS[tag]), start + nbytes


def raster_write(path, raster: RasterTensor):
    Path(path).write_bytes(_pack_record(raster))


def raster_read(path) -> RasterTensor:
    buf = Path(path).read_bytes()
    raster, end = _unpack_record(buf, 0)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after payload")
    return raster


def checkpoint_write(path, params: list[tuple[str, np.ndarray]]):
    """Chain named flat-f32 records under a u32 record count."""
    parts = [struct.pack("<I", len(params))]
    for name, arr in params:
        blob = np.ascontiguousarray(arr, dtype=np.float32).reshape(1, 1, -1)
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(_pack_record(RasterTensor(blob, tag="checkpoint")))
    Path(path).write_bytes(b"".join(parts))


def checkpoint_read(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if len(buf) < 4:
        raise FormatError("truncated checkpoint")
    (count,) = struct.unpack_from("<I", buf, 0)
    offset = 4
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        if len(buf) - offset < 4:
            raise FormatError("truncated record name length")
        (nlen,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        if len(buf) - offset < nlen:
            raise FormatError("truncated record name")
        name = buf[offset:offset + nlen].decode("utf-8")
        offset += nlen
        raster, offset = _unpack_record(buf, offset)
        out[name] = raster.data.reshape(-1)
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} trailing bytes in checkpoint")
    return out
