"""Grid-space SE(2) warps, flow warps and the low-rank feature projector."""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
from scipy import ndimage, sparse

from .geometry import Se2Pose
from .raster import N_CHANNELS, BevGrid, BevSpec

_ORDER = {"nearest": 0, "bilinear": 1, "cubic": 3}


def fill_values(channels: int, background: bool | None = None) -> np.ndarray:
    """Out-of-bounds value per channel: 0 for semantics, 1 for the background channel.

    ``background=None`` treats the last channel as background only for
    mask-shaped grids (``C + 1`` channels).
    """
    if background is None:
        background = channels == N_CHANNELS
    fill = np.zeros(channels)
    if background:
        fill[-1] = 1.0
    return fill


def bilinear_planes(data: np.ndarray, rows: np.ndarray, cols: np.ndarray, fill: np.ndarray,
                    dtype=None) -> np.ndarray:
    """Bilinear samples of every channel, channel-major: shape ``(C, rows.size)``.

    Matches ``map_coordinates(order=1, mode="grid-constant")`` around a
    ``fill``-valued border; corner indices and weights are shared by all
    channels.
    """
    h, w, c = data.shape
    stride = w + 3
    r = np.clip(rows.ravel(), -1.0, float(h)) + 1.0
    q = np.clip(cols.ravel(), -1.0, float(w)) + 1.0
    r0 = np.floor(r)
    q0 = np.floor(q)
    dtype = np.result_type(data.dtype, np.float32) if dtype is None else np.dtype(dtype)
    fr = (r - r0).astype(dtype, copy=False)
    fq = (q - q0).astype(dtype, copy=False)
    i = r0.astype(np.intp) * stride + q0.astype(np.intp)
    out = np.empty((c, len(i)), dtype=dtype)
    plane = np.empty((h + 3, stride), dtype=out.dtype)
    for ch in range(c):
        plane[...] = fill[ch]
        plane[1:h + 1, 1:w + 1] = data[..., ch]
        flat = plane.ravel()
        top = flat[i]
        top += (flat[i + 1] - top) * fq
        bottom = flat[i + stride]
        bottom += (flat[i + stride + 1] - bottom) * fq
        out[ch] = top + (bottom - top) * fr
    return out


def sample(data: np.ndarray, rows: np.ndarray, cols: np.ndarray, interp="bilinear", fill=None) -> np.ndarray:
    """Sample an ``(H, W, C)`` array at continuous index coordinates.

    ``rows`` and ``cols`` share any shape ``S``; the result has shape ``S + (C,)``.
    Samples off the grid blend toward ``fill``.
    """
    order = _ORDER[interp]
    c = data.shape[2]
    fill = fill_values(c) if fill is None else np.asarray(fill, dtype=float)
    if order == 1:
        return np.moveaxis(bilinear_planes(data, rows, cols, fill), 0, -1).reshape(rows.shape + (c,))
    coords = np.stack([rows.ravel(), cols.ravel()])
    out = np.empty((coords.shape[1], c), dtype=np.result_type(data.dtype, np.float32))
    for ch in range(c):
        plane = data[..., ch] - fill[ch] if fill[ch] else data[..., ch]
        ndimage.map_coordinates(plane, coords, output=out[:, ch], order=order,
                                mode="grid-constant", cval=0.0, prefilter=order > 1)
        if fill[ch]:
            out[:, ch] += fill[ch]
    return out.reshape(rows.shape + (c,))


# border added before the spline prefilter, as map_coordinates does for grid-constant
_SPLINE_PAD = 12


def _bspline3(t: np.ndarray) -> np.ndarray:
    t2 = t * t
    t3 = t2 * t
    return np.stack([(1 - t) ** 3, 3 * t3 - 6 * t2 + 4, -3 * t3 + 3 * t2 + 3 * t + 1, t3], axis=1) / 6.0


def cubic_operator(shape: tuple, rows: np.ndarray, cols: np.ndarray) -> sparse.csr_matrix:
    """Sparse map from padded spline coefficients to cubic samples at ``(rows, cols)``."""
    h, w = shape
    hp, wp = h + 2 * _SPLINE_PAD, w + 2 * _SPLINE_PAD
    r = rows.ravel() + _SPLINE_PAD
    q = cols.ravel() + _SPLINE_PAD
    r0, q0 = np.floor(r), np.floor(q)
    n = len(r)
    weights = (_bspline3(r - r0)[:, :, None] * _bspline3(q - q0)[:, None, :]).reshape(n, 16)
    ir = (r0.astype(np.intp)[:, None] + np.arange(-1, 3))[:, :, None]
    iq = (q0.astype(np.intp)[:, None] + np.arange(-1, 3))[:, None, :]
    ok = ((ir >= 0) & (ir < hp) & (iq >= 0) & (iq < wp)).reshape(n, 16)
    idx = (ir * wp + iq).reshape(n, 16)
    point = np.broadcast_to(np.arange(n)[:, None], (n, 16))
    return sparse.csr_matrix((weights[ok], (point[ok], idx[ok])), shape=(n, hp * wp))


def spline_coefficients(data: np.ndarray, fill: np.ndarray) -> np.ndarray:
    """Cubic spline coefficients of ``data - fill`` on the padded grid, flattened to ``(P, C)``."""
    p = _SPLINE_PAD
    coef = np.pad(data - fill, ((p, p), (p, p), (0, 0)))
    for axis in (0, 1):
        coef = ndimage.spline_filter1d(coef, 3, axis=axis, mode="grid-constant", output=np.float64)
    return coef.reshape(-1, data.shape[2])


@lru_cache(maxsize=32)
def _pose_operator(spec: BevSpec, deltas: tuple) -> sparse.csr_matrix:
    coords = [source_coords(spec, d) for d in deltas]
    rows = np.stack([r for r, _ in coords])
    cols = np.stack([c for _, c in coords])
    return cubic_operator(spec.shape, rows, cols)


def _cubic_warps(grid: BevGrid, deltas: tuple, fill) -> np.ndarray:
    # the solvers reuse the same hypothesis sets, so operators are cached per (spec, deltas)
    fill = fill_values(grid.channels) if fill is None else np.asarray(fill, dtype=float)
    out = _pose_operator(grid.spec, deltas) @ spline_coefficients(grid.data, fill)
    return out.reshape((len(deltas),) + grid.data.shape) + fill


def _translate_bilinear(data: np.ndarray, drow: float, dcol: float, fill: np.ndarray) -> np.ndarray:
    """Bilinear sample at ``(row + drow, col + dcol)``; separable, same result as ``bilinear_planes``."""
    out = data - fill
    for axis, d in ((0, drow), (1, dcol)):
        src = np.moveaxis(out, axis, 0)
        n = src.shape[0]
        i0 = math.floor(d)
        res = np.zeros_like(src)
        for off, wt in ((i0, 1.0 - (d - i0)), (i0 + 1, d - i0)):
            lo, hi = max(0, -off), min(n, n - off)
            if wt and lo < hi:
                res[lo:hi] += wt * src[lo + off:hi + off]
        out = np.moveaxis(res, 0, axis)
    return out + fill


def source_coords(spec: BevSpec, delta: Se2Pose):
    """Index coordinates, per output pixel, of the point ``delta⁻¹(q)`` in the input grid."""
    x, y = spec.pixel_centers()
    c, s = math.cos(delta.yaw), math.sin(delta.yaw)
    dx, dy = x - delta.x, y - delta.y
    xs = c * dx + s * dy
    ys = -s * dx + c * dy
    rows = (spec.x_range - xs) / spec.resolution - 0.5
    cols = (spec.y_range - ys) / spec.resolution - 0.5
    return rows, cols


def valid_mask(spec: BevSpec, delta: Se2Pose) -> np.ndarray:
    """Output pixels of ``warp_by_pose(·, delta)`` whose source lies inside the input grid."""
    rows, cols = source_coords(spec, delta)
    h, w = spec.shape
    eps = 1e-9
    return (rows >= -eps) & (rows <= h - 1 + eps) & (cols >= -eps) & (cols <= w - 1 + eps)


def warp_by_pose(grid: BevGrid, delta: Se2Pose, interp="bilinear", fill=None) -> BevGrid:
    """Move grid content by ``delta``: output(q) = input(delta⁻¹ q).

    For a grid observed from pose ``T`` the result is the scene observed
    from ``T ⊗ delta⁻¹``, which is what the solvers search over.
    """
    if interp == "cubic":
        return BevGrid(grid.spec, _cubic_warps(grid, (delta,), fill)[0])
    rows, cols = source_coords(grid.spec, delta)
    return BevGrid(grid.spec, sample(grid.data, rows, cols, interp, fill))


def warp_many(grid: BevGrid, deltas, interp="bilinear", fill=None) -> np.ndarray:
    """``warp_by_pose`` for several deltas at once, stacked as ``(N, H, W, C)``."""
    deltas = tuple(deltas)
    if interp == "cubic":
        return _cubic_warps(grid, deltas, fill)
    if interp == "bilinear" and all(d.yaw == 0.0 for d in deltas):
        f = fill_values(grid.channels) if fill is None else np.asarray(fill, dtype=float)
        res = grid.spec.resolution
        return np.stack([_translate_bilinear(grid.data, d.x / res, d.y / res, f) for d in deltas])
    coords = [source_coords(grid.spec, d) for d in deltas]
    rows = np.stack([r for r, _ in coords])
    cols = np.stack([c for _, c in coords])
    return sample(grid.data, rows, cols, interp, fill)


def pose_to_flow(spec: BevSpec, delta: Se2Pose) -> np.ndarray:
    """Backward flow ``(d_row, d_col)`` in pixels that reproduces ``warp_by_pose(·, delta)``."""
    rows, cols = source_coords(spec, delta)
    h, w = spec.shape
    r0, c0 = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return np.stack([rows - r0, cols - c0], axis=-1)


def warp_by_flow(grid: BevGrid, flow: np.ndarray, interp="bilinear", fill=None) -> BevGrid:
    """Backward warp: output(p) = input(p + flow(p))."""
    h, w = grid.data.shape[:2]
    flow = np.asarray(flow, dtype=float)
    if flow.shape != (h, w, 2):
        raise ValueError(f"flow shape {flow.shape} does not match grid {(h, w, 2)}")
    r0, c0 = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return BevGrid(grid.spec, sample(grid.data, r0 + flow[..., 0], c0 + flow[..., 1], interp, fill))


def compress_channels(feature: np.ndarray, rank: int) -> np.ndarray:
    """Average contiguous channel groups: ``(Hf, Wf, D) -> (Hf, Wf, K)``."""
    groups = np.array_split(np.arange(feature.shape[2]), rank)
    return np.stack([feature[..., g].mean(axis=2) for g in groups], axis=2)


def low_rank_project(feature: np.ndarray, rank: int, bases: np.ndarray | None = None) -> np.ndarray:
    """Project every channel of ``feature`` onto the span of ``rank`` spatial bases.

    Computes ``V (VᵀV)⁺ Vᵀ F`` with ``F`` viewed as ``(Hf*Wf, D)``. ``V``'s
    columns are the flattened channels of ``compress_channels(feature, rank)``
    unless ``bases`` (``(Hf, Wf, K)``) is given, in which case the map is
    linear in ``feature``. The pseudo-inverse drops singular values below
    ``1e-10 * σ_max``, so near-parallel bases are tolerated.
    """
    feature = np.asarray(feature, dtype=float)
    hf, wf, d = feature.shape
    if bases is None:
        if not 1 <= rank <= min(d, hf * wf):
            raise ValueError(f"rank must be in [1, {min(d, hf * wf)}], got {rank}")
        bases = compress_channels(feature, rank)
    elif bases.shape[:2] != (hf, wf):
        raise ValueError(f"bases shape {bases.shape} does not match feature {feature.shape}")
    v = bases.reshape(hf * wf, -1)
    f = feature.reshape(hf * wf, d)
    gram_inv = np.linalg.pinv(v.T @ v, rcond=1e-10, hermitian=True)
    return (v @ (gram_inv @ (v.T @ f))).reshape(hf, wf, d)
