"""Supervision formulas: probability, pose and adaptively weighted total loss."""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from .dema import DofDistribution
from .geometry import Se2Pose, wrap_angle

EPS = 1e-8


class ProbLoss(NamedTuple):
    value: float
    clamped: bool


def sample1d(dist: DofDistribution, value: float) -> tuple:
    """Probability at ``value`` by linear interpolation between neighboring bins.

    Returns ``(probability, clamped)``; values outside the grid use the
    nearest end bin.
    """
    grid = dist.grid.values
    lo, hi = float(grid[0]), float(grid[-1])
    clamped = not lo - 1e-12 <= value <= hi + 1e-12
    v = min(max(float(value), lo), hi)
    return float(np.interp(v, grid, dist.probs)), clamped


def prob_loss(dist: DofDistribution, gt_value: float) -> ProbLoss:
    p, clamped = sample1d(dist, gt_value)
    return ProbLoss(-math.log(max(p, EPS)), clamped)


def smooth_l1(d: float, beta: float = 1.0) -> float:
    d = abs(d)
    return 0.5 * d * d / beta if d < beta else d - 0.5 * beta


def pose_loss(est: Se2Pose, gt: Se2Pose, beta: float = 1.0) -> float:
    """Smooth-L1 summed over x (m), y (m) and wrapped yaw error (deg)."""
    dyaw = math.degrees(wrap_angle(est.yaw - gt.yaw))
    return sum(smooth_l1(d, beta) for d in (est.x - gt.x, est.y - gt.y, dyaw))


def adaptive_weight(pose_loss_value: float, sem_loss_value: float) -> float:
    if not sem_loss_value > 0:
        raise ValueError(f"semantic loss must be > 0, got {sem_loss_value}")
    r = pose_loss_value / sem_loss_value
    if r < 0.1:
        return 10.0
    if r > 10:
        return 0.1
    return 1.0


def total_loss(sem_obs, sem_map, pose_l, prob_x, prob_y, prob_yaw) -> float:
    parts = (sem_obs, sem_map, pose_l, prob_x, prob_y, prob_yaw)
    if not all(math.isfinite(p) and p >= 0 for p in parts):
        raise ValueError(f"loss terms must be finite and non-negative, got {parts}")
    if sem_obs > 0:
        w = adaptive_weight(pose_l, sem_obs)
    else:
        # r is +inf (or 0/0, where the pose term vanishes anyway)
        w = 0.1
    return sem_obs + sem_map + w * pose_l + 0.1 * (prob_x + prob_y + prob_yaw)
