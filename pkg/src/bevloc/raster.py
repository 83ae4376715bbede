"""Semantic BEV rasterization and the BEVG grid file format.

Pixel ``(row, col)`` has its center at ego coordinates
``x = x_range - (row + 0.5) * res`` and ``y = y_range - (col + 0.5) * res``,
so forward is up and left is image-left.  Channels are the map classes
followed by a background channel.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import ndimage, sparse

from .hdmap import CLASSES, VectorMap

N_CHANNELS = len(CLASSES) + 1
BACKGROUND = len(CLASSES)

BEVG_MAGIC = b"BEVG"
BEVG_VERSION = 1
_HEADER = struct.Struct("<4sHIIIfff")


class GridFormatError(ValueError):
    pass


@dataclass(frozen=True)
class BevSpec:
    x_range: float = 30.0
    y_range: float = 15.0
    resolution: float = 0.15
    line_width: int = 2

    def __post_init__(self):
        if not self.resolution > 0:
            raise ValueError(f"resolution must be > 0, got {self.resolution}")
        if self.line_width < 1:
            raise ValueError(f"line_width must be >= 1, got {self.line_width}")
        for name, extent in (("x_range", self.x_range), ("y_range", self.y_range)):
            n = 2.0 * extent / self.resolution
            if extent <= 0 or abs(n - round(n)) > 1e-6:
                raise ValueError(f"2*{name}/resolution must be a positive integer, got {n}")

    @property
    def shape(self) -> tuple:
        return (round(2.0 * self.x_range / self.resolution), round(2.0 * self.y_range / self.resolution))

    def to_pixel(self, points) -> np.ndarray:
        """Continuous (row, col) index coordinates of ego-frame points."""
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        rows = (self.x_range - pts[:, 0]) / self.resolution - 0.5
        cols = (self.y_range - pts[:, 1]) / self.resolution - 0.5
        return np.stack([rows, cols], axis=1)

    def pixel_centers(self) -> tuple:
        """Ego ``(x, y)`` of every pixel center, each of shape ``(H, W)``."""
        h, w = self.shape
        x = self.x_range - (np.arange(h) + 0.5) * self.resolution
        y = self.y_range - (np.arange(w) + 0.5) * self.resolution
        return np.meshgrid(x, y, indexing="ij")

    def cell_of(self, points) -> np.ndarray:
        """Integer (row, col) of the cell containing each point, clamped to the grid."""
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        h, w = self.shape
        rows = np.floor((self.x_range - pts[:, 0]) / self.resolution).astype(np.int64)
        cols = np.floor((self.y_range - pts[:, 1]) / self.resolution).astype(np.int64)
        return np.stack([np.clip(rows, 0, h - 1), np.clip(cols, 0, w - 1)], axis=1)


@dataclass
class BevGrid:
    spec: BevSpec
    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[:2] != self.spec.shape:
            raise ValueError(f"grid data shape {self.data.shape} does not match spec {self.spec.shape}")

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def copy(self) -> "BevGrid":
        return BevGrid(self.spec, self.data.copy())


def empty_grid(spec: BevSpec, channels: int = N_CHANNELS) -> BevGrid:
    data = np.zeros(spec.shape + (channels,))
    data[..., channels - 1] = 1.0
    return BevGrid(spec, data)


def _line_cells(starts: np.ndarray, ends: np.ndarray) -> np.ndarray:
    """Bresenham cells of many integer segments at once (one step per major-axis pixel)."""
    d = ends - starts
    n = np.maximum(np.abs(d).max(axis=1), 1)
    counts = n + 1
    seg = np.repeat(np.arange(len(starts)), counts)
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    t = np.arange(counts.sum()) - np.repeat(offsets, counts)
    nn = n[seg][:, None]
    dd = d[seg]
    # round(d * t / n) with ties away from zero, in exact integer arithmetic
    step = np.sign(dd) * ((2 * np.abs(dd) * t[:, None] + nn) // (2 * nn))
    return starts[seg] + step


def rasterize(local_map: VectorMap, spec: BevSpec = BevSpec()) -> BevGrid:
    """Draw an ego-frame map into a multi-hot semantic mask with background channel."""
    h, w = spec.shape
    data = np.zeros((h, w, N_CHANNELS))
    occupied = np.zeros((h, w), dtype=bool)
    for ch, cls in enumerate(CLASSES):
        elements = local_map.by_class(cls)
        if not elements:
            continue
        starts, ends = [], []
        for el in elements:
            cells = spec.cell_of(el.points)
            starts.append(cells[:-1])
            ends.append(cells[1:])
        cells = _line_cells(np.concatenate(starts), np.concatenate(ends))
        mask = np.zeros((h, w), dtype=bool)
        mask[cells[:, 0], cells[:, 1]] = True
        if spec.line_width > 1:
            mask = ndimage.binary_dilation(mask, structure=np.ones((spec.line_width,) * 2, dtype=bool))
        data[..., ch] = mask
        occupied |= mask
    data[..., BACKGROUND] = ~occupied
    return BevGrid(spec, data)


@lru_cache(maxsize=16)
def _pool_matrix(n: int, factor: int, sigma: float) -> sparse.csr_matrix:
    """``(n // factor, n)`` matrix: Gaussian blur (edge-replicated) then block mean along one axis."""
    blur = np.eye(n)
    if sigma > 0 and factor > 1:
        # columns are impulse responses, so blur @ x equals gaussian_filter1d(x)
        blur = ndimage.gaussian_filter1d(blur, sigma, axis=0, mode="nearest")
    pool = blur.reshape(n // factor, factor, n).mean(axis=1)
    return sparse.csr_matrix(pool)


def downsample(grid: BevGrid, factor: int = 4, antialias: float | None = None) -> BevGrid:
    """Average-pool by an integer factor (400x200 -> 100x50 at the default spec).

    A Gaussian blur of ``antialias`` fine pixels (default ``factor / 2``)
    runs first; thin strokes otherwise alias, and the aliased part changes
    with sub-pixel shifts, which breaks shift invariance downstream.
    """
    h, w, c = grid.data.shape
    if h % factor or w % factor:
        raise ValueError(f"grid {h}x{w} is not divisible by factor {factor}")
    sigma = float(factor / 2.0 if antialias is None else antialias)
    rows = _pool_matrix(h, factor, sigma)
    cols = _pool_matrix(w, factor, sigma)
    tmp = (rows @ grid.data.reshape(h, w * c)).reshape(h // factor, w, c)
    tmp = np.ascontiguousarray(tmp.transpose(1, 0, 2)).reshape(w, -1)
    data = np.ascontiguousarray((cols @ tmp).reshape(w // factor, h // factor, c).transpose(1, 0, 2))
    spec = replace(grid.spec, resolution=grid.spec.resolution * factor, line_width=1)
    return BevGrid(spec, data)


def grid_write(grid: BevGrid, path) -> None:
    h, w, c = grid.data.shape
    s = grid.spec
    header = _HEADER.pack(BEVG_MAGIC, BEVG_VERSION, h, w, c, s.resolution, s.x_range, s.y_range)
    payload = np.ascontiguousarray(grid.data, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def grid_read(path, line_width: int = 2) -> BevGrid:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise GridFormatError(f"{path}: file is {len(raw)} bytes, header needs {_HEADER.size}")
    magic, version, h, w, c, res, xr, yr = _HEADER.unpack_from(raw, 0)
    if magic != BEVG_MAGIC:
        raise GridFormatError(f"{path}: bad magic {magic!r} at offset 0, expected {BEVG_MAGIC!r}")
    if version != BEVG_VERSION:
        raise GridFormatError(f"{path}: unsupported version {version} at offset 4")
    expected = _HEADER.size + 4 * h * w * c
    if len(raw) != expected:
        raise GridFormatError(
            f"{path}: payload length mismatch: header at offset 6 declares {h}x{w}x{c} "
            f"(file should be {expected} bytes), file is {len(raw)} bytes"
        )
    # header floats are f32; 7 significant digits recovers the written values
    xr, yr, res = (float(f"{v:.7g}") for v in (xr, yr, res))
    spec = BevSpec(xr, yr, res, line_width)
    if spec.shape != (h, w):
        raise GridFormatError(
            f"{path}: dims {h}x{w} at offset 6 disagree with ranges/resolution at offset 18 ({spec.shape})"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(h, w, c).copy()
    return BevGrid(spec, data)
