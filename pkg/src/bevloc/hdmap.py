"""Vectorized HD map model, JSON I/O and Fourier element embeddings."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CLASSES = ("lane_divider", "pedestrian_crossing", "road_boundary")
POINT_TOL = 1e-6


class MapFormatError(ValueError):
    """Map file does not match the expected schema or violates an invariant."""


@dataclass
class MapElement:
    id: int
    cls: str
    points: np.ndarray
    part: int = 0

    def __post_init__(self):
        if isinstance(self.id, bool) or not isinstance(self.id, (int, np.integer)) or self.id < 0:
            raise MapFormatError(f"element id must be a non-negative integer, got {self.id!r}")
        self.id = int(self.id)
        if self.cls not in CLASSES:
            raise MapFormatError(f"element {self.id}: unknown class {self.cls!r}")
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise MapFormatError(f"element {self.id}: points must be a list of [x, y] pairs")
        if len(pts) < 2:
            raise MapFormatError(f"element {self.id}: needs at least 2 points, got {len(pts)}")
        if not np.all(np.isfinite(pts)):
            raise MapFormatError(f"element {self.id}: non-finite coordinates")
        steps = np.hypot(*(pts[1:] - pts[:-1]).T)
        if np.any(steps <= POINT_TOL):
            k = int(np.argmax(steps <= POINT_TOL))
            raise MapFormatError(f"element {self.id}: points {k} and {k + 1} coincide")
        self.points = pts

    @property
    def class_index(self) -> int:
        return CLASSES.index(self.cls)


@dataclass
class VectorMap:
    elements: list = field(default_factory=list)
    frame_tag: str = "global"

    def __post_init__(self):
        seen = set()
        for el in self.elements:
            key = (el.id, el.part)
            if key in seen:
                raise MapFormatError(f"duplicate element id {el.id}")
            seen.add(key)

    def __len__(self):
        return len(self.elements)

    def by_class(self, cls: str) -> list:
        return [el for el in self.elements if el.cls == cls]


def parse_map(text: str, source: str = "<string>") -> VectorMap:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MapFormatError(f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise MapFormatError(f"{source}: top level must be an object")
    frame = doc.get("frame", "global")
    if not isinstance(frame, str):
        raise MapFormatError(f"{source}: 'frame' must be a string")
    raw = doc.get("elements")
    if not isinstance(raw, list):
        raise MapFormatError(f"{source}: 'elements' must be a list")
    elements = []
    seen = set()
    for i, item in enumerate(raw):
        if not isinstance(item, dict):
            raise MapFormatError(f"{source}: elements[{i}] must be an object")
        for key in ("id", "class", "points"):
            if key not in item:
                raise MapFormatError(f"{source}: elements[{i}] is missing field '{key}'")
        el_id = item["id"]
        if el_id in seen:
            raise MapFormatError(f"{source}: duplicate element id {el_id}")
        seen.add(el_id)
        try:
            elements.append(MapElement(el_id, item["class"], item["points"]))
        except MapFormatError as exc:
            raise MapFormatError(f"{source}: elements[{i}]: {exc}") from None
        except (TypeError, ValueError) as exc:
            raise MapFormatError(f"{source}: elements[{i}] (id {el_id}): bad points: {exc}") from None
    return VectorMap(elements, frame)


def load_map(path) -> VectorMap:
    path = Path(path)
    return parse_map(path.read_text(encoding="utf-8"), str(path))


def _num(v: float) -> str:
    s = format(float(v), ".9g")
    return "0" if s == "-0" else s


def dump_map(vector_map: VectorMap) -> str:
    """Canonical JSON text: fixed key order, 9 significant digits, one element per line."""
    lines = []
    for el in vector_map.elements:
        pts = ", ".join(f"[{_num(x)}, {_num(y)}]" for x, y in el.points)
        lines.append(f'    {{"id": {el.id}, "class": {json.dumps(el.cls)}, "points": [{pts}]}}')
    body = ",\n".join(lines)
    return '{\n  "frame": %s,\n  "elements": [\n%s\n  ]\n}\n' % (json.dumps(vector_map.frame_tag), body)


def save_map(vector_map: VectorMap, path) -> None:
    Path(path).write_text(dump_map(vector_map), encoding="utf-8")


def fourier_encode(values, bands: int = 8, base_scale: float = 1.0 / 60.0) -> np.ndarray:
    """Fourier features of 2-D coordinates.

    Row ``k`` holds, for the x component then the y component, interleaved
    ``sin(2π f_b u)``, ``cos(2π f_b u)`` with ``f_b = base_scale * 2**b``.
    Output shape is ``(len(values), 4 * bands)``.
    """
    if bands < 1:
        raise ValueError(f"bands must be >= 1, got {bands}")
    u = np.asarray(values, dtype=float).reshape(-1, 2)
    freqs = base_scale * 2.0 ** np.arange(bands)
    phase = 2.0 * np.pi * u[:, :, None] * freqs  # (n, 2, B)
    out = np.stack([np.sin(phase), np.cos(phase)], axis=-1)  # (n, 2, B, 2)
    return out.reshape(len(u), 4 * bands)


def sinusoidal_code(index: int, width: int) -> np.ndarray:
    j = np.arange(width)
    rate = 1.0 / 10000.0 ** (2 * (j // 2) / width)
    return np.where(j % 2 == 0, np.sin(index * rate), np.cos(index * rate))


def resample_polyline(points, n: int) -> np.ndarray:
    """``n`` points spaced uniformly by arc length, endpoints included."""
    pts = np.asarray(points, dtype=float)
    seg = np.hypot(*(pts[1:] - pts[:-1]).T)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    targets = np.linspace(0.0, s[-1], n)
    idx = np.clip(np.searchsorted(s, targets, side="right") - 1, 0, len(seg) - 1)
    t = (targets - s[idx]) / seg[idx]
    return pts[idx] + t[:, None] * (pts[idx + 1] - pts[idx])


@dataclass
class ElementEmbedding:
    data: np.ndarray
    valid_count: int


def natural_width(bands: int = 8) -> int:
    # pos + dir Fourier blocks, class one-hot, and at least one sin/cos pair for the index
    return 8 * bands + len(CLASSES) + 2


def build_element_embedding(
    element: MapElement,
    n_points: int = 20,
    dim: int = 128,
    bands: int = 8,
    base_scale: float = 1.0 / 60.0,
) -> ElementEmbedding:
    """Fixed-size ``(n_points, dim)`` embedding of one map element.

    Columns are ``[Fourier(position) | Fourier(direction) | one-hot class |
    sinusoidal(element id)]``; the last block takes whatever width remains.
    Elements longer than ``n_points`` are resampled by arc length, shorter
    ones are zero-padded.
    """
    if dim < natural_width(bands):
        raise ValueError(f"dim={dim} is smaller than the natural width {natural_width(bands)}")
    pts = element.points
    if len(pts) > n_points:
        pts = resample_polyline(pts, n_points)
    n = len(pts)
    direction = np.empty_like(pts)
    direction[:-1] = pts[1:] - pts[:-1]
    direction[-1] = direction[-2]

    sem = np.zeros(len(CLASSES))
    sem[element.class_index] = 1.0
    ins_width = dim - 8 * bands - len(CLASSES)
    rows = np.hstack([
        fourier_encode(pts, bands, base_scale),
        fourier_encode(direction, bands, base_scale),
        np.tile(sem, (n, 1)),
        np.tile(sinusoidal_code(element.id, ins_width), (n, 1)),
    ])
    data = np.zeros((n_points, dim))
    data[:n] = rows
    return ElementEmbedding(data, n)
