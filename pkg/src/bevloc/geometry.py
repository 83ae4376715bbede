"""SE(2) pose algebra, point transforms, local-map cropping and hypothesis grids.

Ego frame: +x forward (longitudinal), +y left (lateral), yaw counterclockwise.
Angles are radians internally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from .hdmap import VectorMap


class ConfigError(ValueError):
    """Invalid solver / harness configuration."""


def wrap_angle(angle: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    a = math.fmod(angle + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


@dataclass(frozen=True)
class Se2Pose:
    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        for name in ("x", "y", "yaw"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise ValueError(f"pose component {name} is not finite: {v}")
            object.__setattr__(self, name, v)
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    @classmethod
    def from_degrees(cls, x: float, y: float, yaw_deg: float) -> "Se2Pose":
        return cls(x, y, math.radians(yaw_deg))

    @property
    def yaw_deg(self) -> float:
        return math.degrees(self.yaw)

    def as_matrix(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s, self.x], [s, c, self.y], [0.0, 0.0, 1.0]])

    def __iter__(self):
        yield self.x
        yield self.y
        yield self.yaw


IDENTITY = Se2Pose()


def compose(base: Se2Pose, delta: Se2Pose) -> Se2Pose:
    """Return ``base ⊗ delta``: ``delta`` expressed in the frame of ``base``."""
    c, s = math.cos(base.yaw), math.sin(base.yaw)
    return Se2Pose(
        base.x + delta.x * c - delta.y * s,
        base.y + delta.x * s + delta.y * c,
        base.yaw + delta.yaw,
    )


def inverse(pose: Se2Pose) -> Se2Pose:
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    return Se2Pose(-c * pose.x - s * pose.y, s * pose.x - c * pose.y, -pose.yaw)


class Direction(str, Enum):
    INTO_LOCAL = "into_local"
    INTO_GLOBAL = "into_global"


def transform_points(points, pose: Se2Pose, direction="into_local") -> np.ndarray:
    """Map an (N, 2) array of points between the global frame and the frame at ``pose``."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    rot = np.array([[c, -s], [s, c]])
    direction = Direction(direction)
    if direction is Direction.INTO_LOCAL:
        return (pts - [pose.x, pose.y]) @ rot
    return pts @ rot.T + [pose.x, pose.y]


# Cohen-Sutherland region codes
_INSIDE, _LEFT, _RIGHT, _BOTTOM, _TOP = 0, 1, 2, 4, 8


def _outcode(x, y, xmin, xmax, ymin, ymax):
    code = _INSIDE
    if x < xmin:
        code |= _LEFT
    elif x > xmax:
        code |= _RIGHT
    if y < ymin:
        code |= _BOTTOM
    elif y > ymax:
        code |= _TOP
    return code


def clip_segment(p0, p1, xmin, xmax, ymin, ymax):
    """Clip one segment to an axis-aligned rectangle.

    Returns the clipped ``(q0, q1)`` pair or ``None`` when the segment lies
    entirely outside.
    """
    x0, y0 = float(p0[0]), float(p0[1])
    x1, y1 = float(p1[0]), float(p1[1])
    c0 = _outcode(x0, y0, xmin, xmax, ymin, ymax)
    c1 = _outcode(x1, y1, xmin, xmax, ymin, ymax)
    while True:
        if not (c0 | c1):
            return (x0, y0), (x1, y1)
        if c0 & c1:
            return None
        c = c0 or c1
        if c & _TOP:
            x, y = x0 + (x1 - x0) * (ymax - y0) / (y1 - y0), ymax
        elif c & _BOTTOM:
            x, y = x0 + (x1 - x0) * (ymin - y0) / (y1 - y0), ymin
        elif c & _RIGHT:
            x, y = xmax, y0 + (y1 - y0) * (xmax - x0) / (x1 - x0)
        else:
            x, y = xmin, y0 + (y1 - y0) * (xmin - x0) / (x1 - x0)
        if c == c0:
            x0, y0 = x, y
            c0 = _outcode(x0, y0, xmin, xmax, ymin, ymax)
        else:
            x1, y1 = x, y
            c1 = _outcode(x1, y1, xmin, xmax, ymin, ymax)


def clip_polyline(points, x_range: float, y_range: float, tol: float = 1e-6):
    """Clip a polyline to ``[-x_range, x_range] x [-y_range, y_range]``.

    The result is a list of pieces (each an (N, 2) array with N >= 2); a
    polyline leaving and re-entering the rectangle yields several pieces.
    """
    pieces = []
    current = []
    pts = np.asarray(points, dtype=float)
    for a, b in zip(pts[:-1], pts[1:]):
        seg = clip_segment(a, b, -x_range, x_range, -y_range, y_range)
        if seg is None:
            if current:
                pieces.append(current)
                current = []
            continue
        q0, q1 = seg
        if current and np.hypot(current[-1][0] - q0[0], current[-1][1] - q0[1]) <= tol:
            current.append(q1)
        else:
            if current:
                pieces.append(current)
            current = [q0, q1]
        # the segment left the rectangle: close the piece
        if q1[0] != b[0] or q1[1] != b[1]:
            pieces.append(current)
            current = []
    if current:
        pieces.append(current)

    out = []
    for piece in pieces:
        arr = np.asarray(piece, dtype=float)
        keep = np.ones(len(arr), dtype=bool)
        keep[1:] = np.hypot(*(arr[1:] - arr[:-1]).T) > tol
        arr = arr[keep]
        if len(arr) >= 2:
            out.append(arr)
    return out


def crop_local_map(vector_map: "VectorMap", pose: Se2Pose, spec) -> "VectorMap":
    """Transform a global map into the frame at ``pose`` and clip it to the BEV range.

    ``spec`` needs ``x_range`` and ``y_range`` attributes (e.g. a ``BevSpec``).
    Pieces of a split element keep their element id and are numbered by ``part``.
    """
    from .hdmap import MapElement, VectorMap

    elements = []
    for el in vector_map.elements:
        local = transform_points(el.points, pose, "into_local")
        for part, piece in enumerate(clip_polyline(local, spec.x_range, spec.y_range)):
            elements.append(MapElement(el.id, el.cls, piece, part=part))
    return VectorMap(elements, frame_tag="ego")


class Axis(str, Enum):
    LONGITUDINAL = "longitudinal"
    LATERAL = "lateral"
    YAW = "yaw"


@dataclass(frozen=True)
class HypothesisGrid:
    axis: Axis
    center: float
    half_range: float
    step: float
    values: np.ndarray

    def __len__(self):
        return len(self.values)

    def nearest_index(self, value: float) -> int:
        i = int(round((value - self.values[0]) / self.step))
        return min(max(i, 0), len(self.values) - 1)

    def snap(self, value: float) -> float:
        return float(self.values[self.nearest_index(value)])


def sample_hypotheses(axis, half_range: float, step: float, center: float = 0.0) -> HypothesisGrid:
    """Build the uniform, symmetric hypothesis grid ``center ± half_range``.

    ``half_range`` must be an integer multiple of ``step`` (checked to 1e-9
    relative); the grid has ``2 * half_range / step + 1`` values.
    """
    axis = Axis(axis)
    if not step > 0:
        raise ConfigError(f"{axis.value}: step must be > 0, got {step}")
    if half_range < 0:
        raise ConfigError(f"{axis.value}: half_range must be >= 0, got {half_range}")
    ratio = half_range / step
    n = round(ratio)
    if abs(ratio - n) > 1e-9 * max(1.0, ratio):
        raise ConfigError(
            f"{axis.value}: half_range {half_range} is not a multiple of step {step}"
        )
    values = center + step * np.arange(-n, n + 1, dtype=float)
    return HypothesisGrid(axis, float(center), float(half_range), float(step), values)
