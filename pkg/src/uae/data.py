"""Datasets: IDX image files, synthetic 2-D sets, splits, and PGM/PPM/CSV output.

Every dataset holds flat float vectors scaled into [-1, 1] to match the
decoder's tanh output.
"""
import csv
import enum
import gzip
import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import BadMagic, ConfigError, DimensionMismatch, IoError, TruncatedFile

IDX_LABELS = 0x00000801
IDX_IMAGES = 0x00000803

# Fixed affine map taking the noise-free moons (x in [-1, 2], y in [-0.5, 1])
# into [-0.8, 0.8]^2; noisy points are then clipped to [-1, 1].
MOONS_CENTER = np.array([0.5, 0.25])
MOONS_SCALE = np.array([0.8 / 1.5, 0.8 / 0.75])
GRID_CENTERS = np.array([(a, b) for a in (-0.6, 0.0, 0.6) for b in (-0.6, 0.0, 0.6)])
GRID_STD = 0.05

FMNIST_SPLIT = (5000, 1000, 1000)
SYNTH_SPLIT = (2000, 500, 500)


class Split(enum.Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"
    ALL = "all"


@dataclass(frozen=True)
class Dataset:
    items: np.ndarray  # (count, dim)
    shape: tuple  # (channels, height, width) or (dim,)
    split: Split = Split.ALL

    def __post_init__(self):
        items = np.asarray(self.items, dtype=np.float64)
        if items.ndim != 2 or items.shape[1] != int(np.prod(self.shape)):
            raise DimensionMismatch(f"items {items.shape} do not match shape {self.shape}")
        object.__setattr__(self, "items", items)

    def __len__(self):
        return self.items.shape[0]

    @property
    def dim(self):
        return self.items.shape[1]

    def subset(self, index, split):
        return Dataset(self.items[index], self.shape, split)


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------

def _read_bytes(path):
    opener = gzip.open if str(path).endswith(".gz") else open
    try:
        with opener(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


def load_idx(path):
    """Parse an IDX image (0x803) or label (0x801) file, optionally gzipped.

    Image pixels map to [-1, 1] by ``x / 127.5 - 1``; label files keep their
    integer values in a ``(count, 1)`` dataset.
    """
    data = _read_bytes(path)
    if len(data) < 4:
        raise TruncatedFile(f"{path}: no IDX header")
    (magic,) = struct.unpack(">I", data[:4])
    if magic not in (IDX_LABELS, IDX_IMAGES):
        raise BadMagic(f"{path}: magic {magic:#010x} is not an IDX label or image file")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise TruncatedFile(f"{path}: header cut short")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    size = int(np.prod(dims))
    if len(data) - header < size:
        raise TruncatedFile(f"{path}: expected {size} bytes of data, found {len(data) - header}")
    raw = np.frombuffer(data, dtype=np.uint8, count=size, offset=header)
    if magic == IDX_LABELS:
        return Dataset(raw.astype(np.float64).reshape(-1, 1), (1,))
    images = raw.reshape(dims[0], -1).astype(np.float64) / 127.5 - 1.0
    return Dataset(images, (1, dims[1], dims[2]))


def downsample_fmnist(dataset):
    """28x28 -> pad to 32x32 with -1 (black) -> 2x2 mean pool -> 16x16."""
    count = len(dataset)
    _, h, w = dataset.shape
    img = dataset.items.reshape(count, h, w)
    pad_h, pad_w = (32 - h) // 2, (32 - w) // 2
    padded = np.full((count, 32, 32), -1.0)
    padded[:, pad_h:pad_h + h, pad_w:pad_w + w] = img
    pooled = padded.reshape(count, 16, 2, 16, 2).mean(axis=(2, 4))
    return Dataset(pooled.reshape(count, -1), (1, 16, 16), dataset.split)


# ---------------------------------------------------------------------------
# synthetic sets
# ---------------------------------------------------------------------------

def moons_raw(count, noise_sigma, rng):
    """Two interleaved half circles before normalization."""
    n_outer = count // 2 + count % 2
    t = rng.uniform(0.0, math.pi, size=count)
    outer = np.arange(count) < n_outer
    pts = np.where(outer[:, None],
                   np.stack([np.cos(t), np.sin(t)], axis=1),
                   np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1))
    if noise_sigma > 0.0:
        pts = pts + noise_sigma * rng.standard_normal(pts.shape)
    return pts[rng.permutation(count)]


def synth_moons(count, noise_sigma=0.05, seed=0):
    if count < 1:
        raise ConfigError("count must be at least 1")
    rng = np.random.default_rng(seed)
    pts = (moons_raw(count, noise_sigma, rng) - MOONS_CENTER) * MOONS_SCALE
    return Dataset(np.clip(pts, -1.0, 1.0), (2,))


def synth_gauss_grid(count, seed=0):
    """Equal-weight mixture of nine isotropic Gaussians on a 3x3 grid."""
    if count < 1:
        raise ConfigError("count must be at least 1")
    rng = np.random.default_rng(seed)
    comp = rng.integers(len(GRID_CENTERS), size=count)
    pts = GRID_CENTERS[comp] + GRID_STD * rng.standard_normal((count, 2))
    return Dataset(np.clip(pts, -1.0, 1.0), (2,))


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

def split_indices(count, sizes, seed):
    """Disjoint index blocks of the given sizes from a seeded permutation."""
    if sum(sizes) > count:
        raise ConfigError(f"split sizes {sizes} exceed {count} items")
    perm = np.random.default_rng(seed).permutation(count)
    bounds = np.cumsum((0,) + tuple(sizes))
    return [np.sort(perm[lo:hi]) for lo, hi in zip(bounds[:-1], bounds[1:])]


def make_splits(dataset, sizes, seed=None):
    """Train/val/test datasets.  ``seed=None`` takes leading blocks in file
    order; otherwise blocks of a seeded permutation."""
    if seed is None:
        bounds = np.cumsum((0,) + tuple(sizes))
        if bounds[-1] > len(dataset):
            raise ConfigError(f"split sizes {sizes} exceed {len(dataset)} items")
        blocks = [np.arange(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:])]
    else:
        blocks = split_indices(len(dataset), sizes, seed)
    return {split: dataset.subset(idx, split)
            for split, idx in zip((Split.TRAIN, Split.VAL, Split.TEST), blocks)}


def load_dataset(spec, seed=0, sizes=None):
    """``moons`` | ``grid`` | ``fmnist:PATH`` -> dict of train/val/test datasets."""
    if spec in ("moons", "grid"):
        sizes = tuple(sizes or SYNTH_SPLIT)
        make = synth_moons if spec == "moons" else synth_gauss_grid
        return make_splits(make(sum(sizes), seed=seed), sizes, seed=seed + 1)
    if spec.startswith("fmnist:"):
        sizes = tuple(sizes or FMNIST_SPLIT)
        images = load_idx(spec[len("fmnist:"):])
        if len(images.shape) != 3:
            raise ConfigError("fmnist needs an IDX image file")
        return make_splits(downsample_fmnist(images), sizes)
    raise ConfigError(f"unknown dataset {spec!r}; use moons, grid or fmnist:PATH")


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------

def to_bytes(values):
    """[-1, 1] -> 0..255 with clamping and round-half-up."""
    scaled = np.floor((np.asarray(values, dtype=np.float64) + 1.0) * 127.5 + 0.5)
    return np.clip(scaled, 0, 255).astype(np.uint8)


def write_image_grid(vectors, shape, path, columns=None):
    """Tile images into one binary PGM (1 channel) or PPM (3 channels).

    ``vectors`` are flat channel-major images of ``shape`` (C, H, W).
    Unused tiles are black.
    """
    vec = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    if len(shape) != 3 or shape[0] not in (1, 3):
        raise DimensionMismatch(f"image shape must be (1|3, H, W), got {shape}")
    c, h, w = shape
    if vec.shape[1] != c * h * w:
        raise DimensionMismatch(f"vectors of length {vec.shape[1]} do not fit {shape}")
    count = vec.shape[0]
    cols = columns or math.ceil(math.sqrt(count))
    rows = math.ceil(count / cols)
    canvas = np.zeros((rows * h, cols * w, c), dtype=np.uint8)
    tiles = to_bytes(vec).reshape(count, c, h, w).transpose(0, 2, 3, 1)
    for i, tile in enumerate(tiles):
        r, q = divmod(i, cols)
        canvas[r * h:(r + 1) * h, q * w:(q + 1) * w] = tile
    tag = b"P5" if c == 1 else b"P6"
    header = tag + f"\n{cols * w} {rows * h}\n255\n".encode("ascii")
    try:
        with open(path, "wb") as fh:
            fh.write(header + canvas.tobytes())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_pnm(path):
    """Read a binary PGM/PPM back to a (C, H, W) array in [-1, 1]."""
    data = _read_bytes(path)
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise TruncatedFile(f"{path}: header cut short")
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    pos += 1
    try:
        tag, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    except ValueError:
        raise BadMagic(f"{path}: malformed PGM/PPM header") from None
    if tag not in (b"P5", b"P6") or maxval != 255:
        raise BadMagic(f"{path}: not an 8-bit binary PGM/PPM")
    c = 1 if tag == b"P5" else 3
    if len(data) - pos < w * h * c:
        raise TruncatedFile(f"{path}: pixel data cut short")
    pix = np.frombuffer(data, dtype=np.uint8, count=w * h * c, offset=pos)
    return pix.reshape(h, w, c).transpose(2, 0, 1).astype(np.float64) / 127.5 - 1.0


def write_csv(points, path):
    """2-D points as CSV with header ``x,y``."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise DimensionMismatch(f"expected (count, 2) points, got {pts.shape}")
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "y"])
            writer.writerows([[repr(float(a)), repr(float(b))] for a, b in pts])
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
