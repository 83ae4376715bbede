"""Decoupled BEV matching: yaw from amplitude spectra, then x/y from GeM axis profiles.

The solver returns the correction ``delta`` for which
``warp_by_pose(obs, delta)`` best matches the map grid, i.e. the pose
correction to compose onto the initial pose.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import fft, ndimage, sparse

from .bevops import valid_mask, warp_by_pose, warp_many
from .geometry import Axis, HypothesisGrid, Se2Pose, sample_hypotheses
from .raster import BevGrid


@dataclass
class DofDistribution:
    grid: HypothesisGrid
    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float)
        if self.probs.shape != (len(self.grid),):
            raise ValueError(f"{len(self.probs)} probabilities for {len(self.grid)} hypotheses")

    @property
    def argmax(self) -> int:
        # np.argmax keeps the lowest index on ties
        return int(np.argmax(self.probs))

    @property
    def value(self) -> float:
        return float(self.grid.values[self.argmax])

    @property
    def confidence(self) -> float:
        return float(self.probs[self.argmax])

    @property
    def is_flat(self) -> bool:
        return bool(np.ptp(self.probs) <= 1e-12)


@dataclass
class Cost:
    evaluations: int = 0
    peak_bytes: int = 0


@dataclass
class PoseEstimate:
    delta: Se2Pose
    dist_x: DofDistribution
    dist_y: DofDistribution
    dist_yaw: DofDistribution
    cost: Cost = field(default_factory=Cost)
    joint: np.ndarray | None = None

    @property
    def confidence(self) -> tuple:
        """Probability of the selected hypothesis on each axis (x, y, yaw)."""
        return tuple(
            float(d.probs[d.grid.nearest_index(v)])
            for d, v in zip(self.dists, (self.delta.x, self.delta.y, self.delta.yaw))
        )

    @property
    def dists(self) -> tuple:
        return (self.dist_x, self.dist_y, self.dist_yaw)


def default_hypotheses():
    """±2 m / ±1 m / ±2° at 0.4 m / 0.2 m / 0.4°, 11 hypotheses per axis."""
    return (
        sample_hypotheses(Axis.LONGITUDINAL, 2.0, 0.4),
        sample_hypotheses(Axis.LATERAL, 1.0, 0.2),
        sample_hypotheses(Axis.YAW, math.radians(2.0), math.radians(0.4)),
    )


@dataclass
class DemaConfig:
    hyps_x: HypothesisGrid = None
    hyps_y: HypothesisGrid = None
    hyps_yaw: HypothesisGrid = None
    yaw_temperature: float = 3e-4
    axis_temperature: float = 0.01
    omega: float = 3.0
    n_theta: int = 180
    n_radius: int = 64
    fft_size: int = 128
    spectrum: str = "linear"
    band: float = 0.5
    smooth: float = 0.0
    interp: str = "cubic"
    axis_interp: str = "bilinear"

    def __post_init__(self):
        dx, dy, dyaw = default_hypotheses()
        self.hyps_x = self.hyps_x or dx
        self.hyps_y = self.hyps_y or dy
        self.hyps_yaw = self.hyps_yaw or dyaw


def softmax(scores, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(scores, dtype=float) / temperature
    z = np.exp(z - z.max())
    return z / z.sum()


def softmin(costs, temperature: float = 1.0) -> np.ndarray:
    return softmax(-np.asarray(costs, dtype=float), temperature)


def zncc(a, b) -> float:
    """Zero-mean normalized cross-correlation of two equally shaped arrays (0 if either is flat).

    For 2-D inputs each column (channel) is centered on its own mean before
    the single normalized dot product.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    a = (a - a.mean(axis=0)).ravel()
    b = (b - b.mean(axis=0)).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na <= 1e-12 * max(1.0, a.size) or nb <= 1e-12 * max(1.0, b.size):
        return 0.0
    return float(a @ b / (na * nb))


# -- yaw ---------------------------------------------------------------------

def _pad_square(data: np.ndarray, size: int) -> np.ndarray:
    """Zero-pad the spatial axes of ``(..., H, W, C)`` to a centered ``size x size`` square."""
    h, w, c = data.shape[-3:]
    size = max(size, h, w)
    out = np.zeros(data.shape[:-3] + (size, size, c))
    r0, c0 = (size - h) // 2, (size - w) // 2
    out[..., r0:r0 + h, c0:c0 + w, :] = data
    return out


def _polar_coords(size: int, n_theta: int, n_radius: int, band: float = 1.0):
    center = size // 2
    theta = 2.0 * np.pi * np.arange(n_theta) / n_theta
    radius = (np.arange(n_radius) + 1.0) * band * (size / 2.0 - 1.0) / n_radius
    rows = center + radius[None, :] * np.cos(theta)[:, None]
    cols = center + radius[None, :] * np.sin(theta)[:, None]
    return np.stack([rows.ravel(), cols.ravel()])


@lru_cache(maxsize=16)
def _polar_operator(size: int, n_theta: int, n_radius: int, band: float) -> sparse.csr_matrix:
    """Bilinear polar resampling summed over radius, read from the unshifted half spectrum.

    Rows are angle bins; columns index ``rfft2`` output of a ``size x size``
    input. Centered-spectrum bins map back through ``fftshift`` and the
    point symmetry of real-input spectra.
    """
    rows, cols = _polar_coords(size, n_theta, n_radius, band)
    r0, q0 = np.floor(rows), np.floor(cols)
    fr, fq = rows - r0, cols - q0
    theta_bin = np.repeat(np.arange(n_theta), n_radius)
    half = size // 2 + 1
    entries, cols_out, weights = [], [], []
    for dr, dq, wt in ((0, 0, (1 - fr) * (1 - fq)), (0, 1, (1 - fr) * fq), (1, 0, fr * (1 - fq)), (1, 1, fr * fq)):
        k1 = (r0.astype(np.intp) + dr - size // 2) % size
        k2 = (q0.astype(np.intp) + dq - size // 2) % size
        mirror = k2 >= half
        k1 = np.where(mirror, (-k1) % size, k1)
        k2 = np.where(mirror, (-k2) % size, k2)
        entries.append(theta_bin)
        cols_out.append(k1 * half + k2)
        weights.append(wt)
    return sparse.csr_matrix(
        (np.concatenate(weights), (np.concatenate(entries), np.concatenate(cols_out))),
        shape=(n_theta, size * half),
    )


_COMPRESS = {"linear": lambda a: a, "log": np.log1p}


def yaw_features(stack: np.ndarray, n_theta: int = 180, n_radius: int = 64, fft_size: int = 128,
                 spectrum: str = "log", band: float = 1.0) -> np.ndarray:
    """``yaw_feature`` of every grid in an ``(N, H, W, C)`` stack, shape ``(N, n_theta, C)``."""
    if not 0.0 < band <= 1.0:
        raise ValueError(f"band must be in (0, 1], got {band}")
    compress = _COMPRESS[spectrum]
    stack = np.asarray(stack, dtype=float)
    padded = _pad_square(stack - stack.mean(axis=(1, 2), keepdims=True), fft_size)
    n, size, _, c = padded.shape
    amp = compress(np.abs(fft.rfft2(padded, axes=(1, 2))))
    amp[:, 0, 0, :] = 0.0
    flat = np.moveaxis(amp.reshape(n, -1, c), 1, 0).reshape(-1, n * c)
    out = _polar_operator(size, n_theta, n_radius, float(band)) @ flat
    return np.moveaxis(out.reshape(n_theta, n, c), 1, 0)


def yaw_feature(grid, n_theta: int = 180, n_radius: int = 64, fft_size: int = 128,
                spectrum: str = "log", band: float = 1.0) -> np.ndarray:
    """Angular profile of the amplitude spectrum, one column per channel.

    Channels are made zero-mean and zero-padded to ``fft_size`` squared when
    smaller. The centered spectrum (optionally ``log1p``-compressed) has its
    DC bin zeroed, is resampled onto ``n_theta x n_radius`` polar bins over a
    full turn out to ``band`` times the Nyquist radius, and summed over
    radius. Rotating content by ``β`` shifts the profile by
    ``β * n_theta / 2π`` bins; translations only change the phase.
    """
    data = grid.data if isinstance(grid, BevGrid) else np.asarray(grid, dtype=float)
    return yaw_features(data[None], n_theta, n_radius, fft_size, spectrum, band)[0]


def _normalized_mse(ref_feature: np.ndarray, feature: np.ndarray) -> float:
    energy = float(np.mean(ref_feature ** 2))
    err = float(np.mean((ref_feature - feature) ** 2))
    return err / energy if energy > 0 else err


def solve_yaw(obs: BevGrid, ref: BevGrid, hyps: HypothesisGrid, temperature: float = 3e-4,
              n_theta: int = 180, n_radius: int = 64, fft_size: int = 128, counter: Cost | None = None,
              spectrum: str = "log", band: float = 1.0, interp: str = "cubic"):
    """Yaw distribution from softmin of normalized yaw-feature MSE per hypothesis."""
    if obs.spec != ref.spec:
        raise ValueError("obs and map grids must share a BevSpec")
    feat = dict(n_theta=n_theta, n_radius=n_radius, fft_size=fft_size, spectrum=spectrum, band=band)
    ref_feat = yaw_feature(ref, **feat)
    rotated = warp_many(obs, [Se2Pose(0.0, 0.0, a) for a in hyps.values], interp)
    mse = np.array([_normalized_mse(ref_feat, f) for f in yaw_features(rotated, **feat)])
    if counter is not None:
        counter.evaluations += len(hyps)
    return DofDistribution(hyps, softmin(mse, temperature)), mse


# -- longitudinal / lateral ---------------------------------------------------

def axis_feature(grid, axis, omega: float = 3.0, mask=None) -> np.ndarray:
    """GeM profile along one axis: ``(mean_v F[u, v]^ω)^(1/ω)`` per channel.

    ``longitudinal`` pools over columns (one value per row, ``H x C``);
    ``lateral`` pools over rows (``W x C``). With a boolean ``mask`` the
    mean runs over masked-in pixels only; lines with none come out as 0.
    """
    axis = Axis(axis)
    data = grid.data if isinstance(grid, BevGrid) else np.asarray(grid, dtype=float)
    pool_dim = 1 if axis is Axis.LONGITUDINAL else 0
    x = np.clip(data, 0.0, None)
    if omega != 1:
        x = x ** omega
    if mask is None:
        pooled = x.mean(axis=pool_dim)
    else:
        m = np.asarray(mask, dtype=float)[..., None]
        n = m.sum(axis=pool_dim)
        pooled = (x * m).sum(axis=pool_dim) / np.maximum(n, 1.0)
    return pooled if omega == 1 else pooled ** (1.0 / omega)


def _shift(axis: Axis, d: float, yaw: float = 0.0, other: float = 0.0) -> Se2Pose:
    return Se2Pose(d, other, yaw) if axis is Axis.LONGITUDINAL else Se2Pose(other, d, yaw)


def solve_axis(obs_rot: BevGrid, ref: BevGrid, axis, hyps: HypothesisGrid, temperature: float = 0.01,
               omega: float = 3.0, counter: Cost | None = None, interp: str = "cubic",
               yaw: float = 0.0, other: float = 0.0):
    """Translation distribution along one axis from softmax of axis-feature ZNCC.

    Both profiles pool only over pixels that the shifted observation
    actually covers (given the ``yaw`` already applied to ``obs_rot``),
    so unobserved strips do not pull the estimate toward zero shift.
    ``other`` is a fixed shift along the remaining axis applied to every
    hypothesis (the longitudinal estimate, when solving laterally).
    """
    axis = Axis(axis)
    if obs_rot.spec != ref.spec:
        raise ValueError("obs and map grids must share a BevSpec")
    pool_dim = 1 if axis is Axis.LONGITUDINAL else 0
    moved = warp_many(obs_rot, [_shift(axis, d, 0.0, other) for d in hyps.values], interp)
    masks = np.stack([valid_mask(obs_rot.spec, _shift(axis, d, yaw, other)) for d in hyps.values])
    # GeM pooling of every hypothesis at once; same values as axis_feature with a mask
    out = "nhc" if axis is Axis.LONGITUDINAL else "nwc"
    m = masks.astype(float)
    counts = np.maximum(m.sum(axis=1 + pool_dim), 1.0)[..., None]
    ref_pow = np.clip(ref.data, 0.0, None) ** omega
    mov_pow = np.clip(moved, 0.0, None) ** omega
    ref_prof = (np.einsum(f"nhw,hwc->{out}", m, ref_pow) / counts) ** (1.0 / omega)
    mov_prof = (np.einsum(f"nhwc,nhw->{out}", mov_pow, m) / counts) ** (1.0 / omega)
    ok = masks.any(axis=1 + pool_dim)
    scores = np.array([zncc(r[k], v[k]) for r, v, k in zip(ref_prof, mov_prof, ok)])
    if counter is not None:
        counter.evaluations += len(hyps)
    return DofDistribution(hyps, softmax(scores, temperature)), scores


def smooth_grid(grid: BevGrid, sigma: float) -> BevGrid:
    """Gaussian blur over the spatial axes; ``sigma`` in solver pixels."""
    if sigma <= 0:
        return grid
    return BevGrid(grid.spec, ndimage.gaussian_filter(grid.data, (sigma, sigma, 0), mode="nearest"))


def dema_solve(obs: BevGrid, ref: BevGrid, config: DemaConfig | None = None) -> PoseEstimate:
    """Yaw first, then longitudinal and lateral on the yaw-corrected observation."""
    config = config or DemaConfig()
    cost = Cost()
    obs, ref = smooth_grid(obs, config.smooth), smooth_grid(ref, config.smooth)
    dist_yaw, _ = solve_yaw(obs, ref, config.hyps_yaw, config.yaw_temperature,
                            config.n_theta, config.n_radius, config.fft_size, cost,
                            config.spectrum, config.band, config.interp)
    obs_rot = warp_by_pose(obs, Se2Pose(0.0, 0.0, dist_yaw.value), config.interp)
    dist_x, _ = solve_axis(obs_rot, ref, Axis.LONGITUDINAL, config.hyps_x,
                           config.axis_temperature, config.omega, cost, config.axis_interp, dist_yaw.value)
    dist_y, _ = solve_axis(obs_rot, ref, Axis.LATERAL, config.hyps_y,
                           config.axis_temperature, config.omega, cost, config.axis_interp, dist_yaw.value,
                           dist_x.value)
    cost.peak_bytes = 2 * obs.data.nbytes
    delta = Se2Pose(dist_x.value, dist_y.value, dist_yaw.value)
    return PoseEstimate(delta, dist_x, dist_y, dist_yaw, cost)
