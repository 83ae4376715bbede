import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bevloc.geometry import (
    ConfigError, Se2Pose, clip_polyline, clip_segment, compose, crop_local_map, inverse,
    sample_hypotheses, transform_points, wrap_angle,
)
from bevloc.hdmap import MapElement, VectorMap
from bevloc.raster import BevSpec

coord = st.floats(-100, 100, allow_nan=False)
angle = st.floats(-10, 10, allow_nan=False)
poses = st.builds(Se2Pose, coord, coord, angle)


def matrix_pose(m):
    return Se2Pose(m[0, 2], m[1, 2], math.atan2(m[1, 0], m[0, 0]))


def assert_pose_close(a, b, tol=1e-9):
    assert abs(a.x - b.x) < tol and abs(a.y - b.y) < tol
    assert abs(wrap_angle(a.yaw - b.yaw)) < tol


def test_wrap_angle_range():
    assert wrap_angle(math.pi) == pytest.approx(math.pi)
    assert wrap_angle(-math.pi) == pytest.approx(math.pi)
    assert wrap_angle(3 * math.pi / 2) == pytest.approx(-math.pi / 2)
    assert wrap_angle(0.0) == 0.0


def test_pose_rejects_nonfinite():
    with pytest.raises(ValueError):
        Se2Pose(math.nan, 0, 0)
    with pytest.raises(ValueError):
        Se2Pose(0, math.inf, 0)


def test_compose_examples():
    assert_pose_close(compose(Se2Pose(1, 2, 0), Se2Pose()), Se2Pose(1, 2, 0))
    assert_pose_close(compose(Se2Pose(0, 0, math.pi / 2), Se2Pose(1, 0, 0)), Se2Pose(0, 1, math.pi / 2))


def test_compose_matches_matrix_product():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        a = Se2Pose(*rng.uniform(-50, 50, 2), rng.uniform(-math.pi, math.pi))
        b = Se2Pose(*rng.uniform(-50, 50, 2), rng.uniform(-math.pi, math.pi))
        got = compose(a, b)
        ref = matrix_pose(a.as_matrix() @ b.as_matrix())
        worst = max(worst, abs(got.x - ref.x), abs(got.y - ref.y), abs(wrap_angle(got.yaw - ref.yaw)))
    assert worst < 1e-12


def test_inverse_examples():
    assert_pose_close(inverse(Se2Pose()), Se2Pose())
    assert_pose_close(inverse(Se2Pose(1, 0, math.pi / 2)), Se2Pose(0, 1, -math.pi / 2))
    m = Se2Pose(1, 0, math.pi / 2).as_matrix()
    assert_pose_close(inverse(Se2Pose(1, 0, math.pi / 2)), matrix_pose(np.linalg.inv(m)))


@given(poses)
def test_compose_inverse_is_identity(p):
    assert_pose_close(compose(p, inverse(p)), Se2Pose(), tol=1e-12 * max(1.0, abs(p.x) + abs(p.y)))
    assert_pose_close(compose(inverse(p), p), Se2Pose(), tol=1e-12 * max(1.0, abs(p.x) + abs(p.y)))


@given(poses, poses, poses)
def test_compose_associative(a, b, c):
    assert_pose_close(compose(compose(a, b), c), compose(a, compose(b, c)), tol=1e-9)


def test_transform_points_examples():
    pts = np.array([[1.0, 2.0], [-3.0, 4.0]])
    np.testing.assert_allclose(transform_points(pts, Se2Pose()), pts)
    np.testing.assert_allclose(transform_points([[5.0, 0.0]], Se2Pose(5, 0, 0)), [[0.0, 0.0]], atol=1e-15)
    # a point ahead of a pose facing +y sits on the local +x axis
    np.testing.assert_allclose(transform_points([[0.0, 3.0]], Se2Pose(0, 0, math.pi / 2)), [[3.0, 0.0]], atol=1e-12)


@given(poses, st.lists(st.tuples(coord, coord), min_size=1, max_size=20))
def test_transform_points_round_trip(p, pts):
    pts = np.array(pts)
    back = transform_points(transform_points(pts, p, "into_local"), p, "into_global")
    assert np.max(np.abs(back - pts)) < 1e-9


@given(poses, poses, st.tuples(coord, coord))
def test_transform_points_agrees_with_compose(a, b, pt):
    # local coordinates in frame a⊗b equal local-in-b of local-in-a
    direct = transform_points([pt], compose(a, b))
    nested = transform_points(transform_points([pt], a), b)
    np.testing.assert_allclose(direct, nested, atol=1e-8)


def test_clip_segment_edge_endpoint():
    q0, q1 = clip_segment((0.0, 0.0), (40.0, 4.0), -30, 30, -15, 15)
    assert q0 == (0.0, 0.0)
    assert q1[0] == 30.0
    assert q1[1] == pytest.approx(3.0)
    assert clip_segment((40, 0), (50, 0), -30, 30, -15, 15) is None


def test_clip_polyline_splits_on_reentry():
    pts = [(-10, 0), (0, 20), (10, 0)]
    pieces = clip_polyline(pts, 30, 15)
    assert len(pieces) == 2
    assert pieces[0][-1][1] == 15.0 and pieces[1][0][1] == 15.0


@settings(max_examples=60)
@given(st.lists(st.tuples(st.floats(-60, 60), st.floats(-40, 40)), min_size=2, max_size=10, unique=True))
def test_clip_polyline_inside_rectangle(pts):
    for piece in clip_polyline(pts, 30, 15):
        assert len(piece) >= 2
        assert np.all(np.abs(piece[:, 0]) <= 30 + 1e-9)
        assert np.all(np.abs(piece[:, 1]) <= 15 + 1e-9)


def test_crop_local_map_examples():
    spec = BevSpec()
    assert len(crop_local_map(VectorMap([]), Se2Pose(), spec)) == 0
    line = VectorMap([MapElement(0, "road_boundary", [(-50, 0), (50, 0)])])
    out = crop_local_map(line, Se2Pose(), spec)
    assert len(out) == 1
    np.testing.assert_allclose(out.elements[0].points, [(-30, 0), (30, 0)])
    cross = VectorMap([MapElement(3, "lane_divider", [(20, 1), (40, 1)])])
    (el,) = crop_local_map(cross, Se2Pose(), spec).elements
    assert el.points[-1][0] == 30.0 and el.id == 3


def test_crop_local_map_keeps_ids_on_split():
    vmap = VectorMap([MapElement(7, "road_boundary", [(-10, 0), (0, 20), (10, 0)])])
    out = crop_local_map(vmap, Se2Pose(), BevSpec())
    assert [(e.id, e.part) for e in out.elements] == [(7, 0), (7, 1)]


def test_sample_hypotheses_counts():
    assert len(sample_hypotheses("yaw", math.radians(2), math.radians(0.4))) == 11
    assert len(sample_hypotheses("longitudinal", 2.0, 0.4)) == 11
    assert len(sample_hypotheses("lateral", 1.0, 0.2)) == 11
    g = sample_hypotheses("lateral", 0.0, 0.2)
    np.testing.assert_array_equal(g.values, [0.0])


def test_sample_hypotheses_symmetric_and_centered():
    g = sample_hypotheses("longitudinal", 2.0, 0.4, center=1.0)
    np.testing.assert_allclose(g.values - 1.0, -(g.values[::-1] - 1.0), atol=1e-12)
    assert g.values[5] == 1.0


def test_sample_hypotheses_rejects_bad_input():
    with pytest.raises(ConfigError):
        sample_hypotheses("longitudinal", 1.0, 0.3)
    with pytest.raises(ConfigError):
        sample_hypotheses("longitudinal", 1.0, 0.0)
    with pytest.raises(ConfigError):
        sample_hypotheses("lateral", -1.0, 0.2)
    with pytest.raises(ValueError):
        sample_hypotheses("vertical", 1.0, 0.2)


def test_snap_and_nearest_index():
    g = sample_hypotheses("longitudinal", 2.0, 0.4)
    assert g.snap(0.5) == pytest.approx(0.4)
    assert g.snap(-7) == pytest.approx(-2.0)
    assert g.nearest_index(9.0) == 10
