"""Exhaustive joint 3-DoF matching over the full hypothesis grid.

Every ``(Δx_i, Δy_j, Δα_k)`` triple gets its own single warp of the
observation and a whole-grid ZNCC score against the map over the pixels
the warp keeps in view; it shares no interpolation chain with the
decoupled solver and serves as its oracle.
"""

from __future__ import annotations

import math

import numpy as np

from .bevops import bilinear_planes, fill_values
from .dema import Cost, DofDistribution, PoseEstimate, default_hypotheses, smooth_grid, softmax
from .geometry import HypothesisGrid, Se2Pose
from .raster import BevGrid

AXES = ("x", "y", "yaw")


def marginalize(joint: np.ndarray, axis, grid: HypothesisGrid | None = None):
    """Sum a ``(N_x, N_y, N_α)`` joint over the two other axes.

    Returns a ``DofDistribution`` when ``grid`` is given, else the raw vector.
    """
    k = AXES.index(axis) if isinstance(axis, str) else int(axis)
    other = tuple(i for i in range(3) if i != k)
    probs = np.asarray(joint, dtype=float).sum(axis=other)
    return DofDistribution(grid, probs) if grid is not None else probs


def _masked_zncc(ref: np.ndarray, warped: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """ZNCC of each warped grid against ``ref`` over its own valid pixels.

    ``ref`` is ``(C, P)``, ``warped`` ``(C, N, P)``, ``mask`` ``(N, P)``.
    Channels are centered separately, as in the decoupled solver. The
    covariance is unchanged by shifting ``ref``, so it is centered up front
    to keep the float32 products free of cancellation.
    """
    m = mask.astype(warped.dtype)
    n = np.maximum(m.sum(axis=1, dtype=float), 1.0)
    cov = np.zeros(len(m))
    var_w = np.zeros(len(m))
    var_r = np.zeros(len(m))
    for w, r in zip(warped, ref):
        r = (r - r.mean()).astype(warped.dtype)
        mw = w * m
        s_w = mw.sum(axis=1, dtype=float)
        s_r = (m @ r).astype(float)
        cov += (mw @ r).astype(float) - s_w * s_r / n
        var_w += np.clip(np.einsum("np,np->n", mw, w, dtype=float) - s_w ** 2 / n, 0.0, None)
        var_r += np.clip((m @ (r * r)).astype(float) - s_r ** 2 / n, 0.0, None)
    scores = np.zeros(len(m))
    tol = 1e-12 * ref.size
    ok = (var_w > tol) & (var_r > tol)
    scores[ok] = cov[ok] / np.sqrt(var_w[ok] * var_r[ok])
    return scores


def fuma_scores(obs: BevGrid, ref: BevGrid, hyps_x, hyps_y, hyps_yaw, cost: Cost | None = None,
                dtype=np.float32) -> np.ndarray:
    """ZNCC of every bilinearly warped observation against the map, shape ``(N_x, N_y, N_α)``.

    Samples are computed in ``dtype`` (float32 by default, to halve memory
    traffic); score sums accumulate in float64.
    """
    if obs.spec != ref.spec:
        raise ValueError("obs and map grids must share a BevSpec")
    spec = obs.spec
    h, w = spec.shape
    x, y = spec.pixel_centers()
    tx = hyps_x.values[:, None, None, None]
    ty = hyps_y.values[None, :, None, None]
    dx = x - tx
    dy = y - ty
    n = len(hyps_x) * len(hyps_y)
    ref_planes = np.moveaxis(ref.data, -1, 0).reshape(-1, h * w)
    fill = fill_values(obs.channels)
    scores = np.empty((len(hyps_x), len(hyps_y), len(hyps_yaw)))
    peak = 0
    eps = 1e-9
    for k, alpha in enumerate(hyps_yaw.values):
        c, s = math.cos(alpha), math.sin(alpha)
        rows = (spec.x_range - (c * dx + s * dy)) / spec.resolution - 0.5
        cols = (spec.y_range - (-s * dx + c * dy)) / spec.resolution - 0.5
        warped = bilinear_planes(obs.data, rows, cols, fill, dtype)
        mask = (rows >= -eps) & (rows <= h - 1 + eps) & (cols >= -eps) & (cols <= w - 1 + eps)
        peak = max(peak, warped.nbytes)
        scores[:, :, k] = _masked_zncc(ref_planes, warped.reshape(-1, n, h * w),
                                       mask.reshape(n, h * w)).reshape(len(hyps_x), len(hyps_y))
    if cost is not None:
        cost.evaluations += scores.size
        cost.peak_bytes = max(cost.peak_bytes, peak)
    return scores


def fuma_solve(obs: BevGrid, ref: BevGrid, hyps_x=None, hyps_y=None, hyps_yaw=None,
               temperature: float = 4e-4, smooth: float = 0.0) -> PoseEstimate:
    """Joint softmax over all triples; the reported pose is the joint argmax.

    Both grids get the same Gaussian blur (``smooth`` pixels) as in the
    decoupled solver before scoring.
    """
    dx, dy, dyaw = default_hypotheses()
    hyps_x, hyps_y, hyps_yaw = hyps_x or dx, hyps_y or dy, hyps_yaw or dyaw
    obs, ref = smooth_grid(obs, smooth), smooth_grid(ref, smooth)
    cost = Cost()
    scores = fuma_scores(obs, ref, hyps_x, hyps_y, hyps_yaw, cost)
    joint = softmax(scores.ravel(), temperature).reshape(scores.shape)
    i, j, k = np.unravel_index(int(np.argmax(joint)), joint.shape)
    delta = Se2Pose(hyps_x.values[i], hyps_y.values[j], hyps_yaw.values[k])
    return PoseEstimate(
        delta,
        marginalize(joint, "x", hyps_x),
        marginalize(joint, "y", hyps_y),
        marginalize(joint, "yaw", hyps_yaw),
        cost,
        joint=joint,
    )
