import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from bevloc.bevops import (
    bilinear_planes, compress_channels, fill_values, low_rank_project, pose_to_flow, sample, valid_mask,
    warp_by_flow, warp_by_pose, warp_many,
)
from bevloc.geometry import Se2Pose, inverse
from bevloc.hdmap import MapElement, VectorMap
from bevloc.raster import BevGrid, BevSpec, rasterize

SMALL = BevSpec(6.0, 3.0, 0.5)  # 24 x 12


def random_grid(seed, spec=SMALL, c=4):
    return BevGrid(spec, np.random.default_rng(seed).random(spec.shape + (c,)))


def test_fill_values():
    np.testing.assert_array_equal(fill_values(4), [0, 0, 0, 1])
    np.testing.assert_array_equal(fill_values(3), [0, 0, 0])
    np.testing.assert_array_equal(fill_values(2, background=True), [0, 1])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_bilinear_planes_matches_map_coordinates(seed):
    rng = np.random.default_rng(seed)
    data = rng.random((9, 7, 3))
    fill = np.array([0.0, 0.25, 1.0])
    rows = rng.uniform(-3, 12, 200)
    cols = rng.uniform(-3, 10, 200)
    got = bilinear_planes(data, rows, cols, fill, np.float64)
    for ch in range(3):
        ref = ndimage.map_coordinates(data[..., ch] - fill[ch], [rows, cols], order=1,
                                      mode="grid-constant", cval=0.0) + fill[ch]
        np.testing.assert_allclose(got[ch], ref, atol=1e-12)


def test_sample_orders_agree_on_integer_coords():
    g = random_grid(0)
    r, c = np.meshgrid(np.arange(24.0), np.arange(12.0), indexing="ij")
    for interp in ("nearest", "bilinear", "cubic"):
        np.testing.assert_allclose(sample(g.data, r, c, interp), g.data, atol=1e-9)


def test_identity_nearest_bit_identical():
    g = rasterize(VectorMap([MapElement(0, "lane_divider", [(-30, 1), (30, 3)])]))
    assert warp_by_pose(g, Se2Pose(), "nearest").data.tobytes() == g.data.tobytes()


def test_pixel_translation_shifts_rows():
    g = rasterize(VectorMap([MapElement(0, "pedestrian_crossing", [(0, -5), (0, 5), (2, 5)])]))
    k = 3
    # moving content forward (+x) moves it up the image (toward row 0)
    out = warp_by_pose(g, Se2Pose(k * 0.15, 0, 0), "nearest")
    before = np.argwhere(g.data[..., 1] > 0)
    after = np.argwhere(out.data[..., 1] > 0)
    np.testing.assert_array_equal(np.sort(after[:, 0]), np.sort(before[:, 0] - k))


def test_translation_moves_content_to_delta():
    spec = BevSpec(line_width=1)
    grid = rasterize(VectorMap([MapElement(0, "road_boundary", [(0.0, -8.0), (0.0, 8.0)])]), spec)
    moved = warp_by_pose(grid, Se2Pose(1.5, 0, 0), "nearest")
    expect = rasterize(VectorMap([MapElement(0, "road_boundary", [(1.5, -8.0), (1.5, 8.0)])]), spec)
    np.testing.assert_array_equal(moved.data[..., 2], expect.data[..., 2])


def test_yaw_90_on_square_crop_equals_rot90():
    spec = BevSpec(5.0, 5.0, 0.5)  # 20 x 20, center at a pixel corner
    g = random_grid(2, spec)
    out = warp_by_pose(g, Se2Pose(0, 0, math.pi / 2), "bilinear")
    # x is image-up and y image-left, so a counterclockwise yaw is a counterclockwise array turn
    np.testing.assert_allclose(out.data, np.rot90(g.data, k=1, axes=(0, 1)), atol=1e-9)


def test_warp_many_matches_single():
    g = random_grid(3)
    deltas = [Se2Pose(0.3, -0.2, 0.1), Se2Pose(-1, 0.4, -0.05), Se2Pose()]
    stack = warp_many(g, deltas, "bilinear")
    for d, s in zip(deltas, stack):
        np.testing.assert_allclose(s, warp_by_pose(g, d).data, atol=1e-12)
    cubic = warp_many(g, deltas, "cubic")
    np.testing.assert_allclose(cubic[1], warp_by_pose(g, deltas[1], "cubic").data, atol=1e-12)


def test_warp_inverse_round_trip_inside():
    g = BevGrid(SMALL, ndimage.gaussian_filter(random_grid(4).data, (2, 2, 0)))
    d = Se2Pose(0.7, -0.3, 0.05)
    back = warp_by_pose(warp_by_pose(g, d, "cubic"), inverse(d), "cubic")
    inner = (slice(6, -6), slice(4, -4))
    assert np.abs(back.data[inner] - g.data[inner]).max() < 0.05


def test_out_of_bounds_fill():
    g = random_grid(5)
    out = warp_by_pose(g, Se2Pose(100, 0, 0))
    np.testing.assert_array_equal(out.data, np.broadcast_to([0, 0, 0, 1.0], out.data.shape))


def test_valid_mask():
    assert valid_mask(SMALL, Se2Pose()).all()
    m = valid_mask(SMALL, Se2Pose(1.0, 0, 0))
    # content moves up two rows, the bottom two rows have no source
    assert not m[-2:].any() and m[:-2].all()
    rows, cols = np.nonzero(~valid_mask(SMALL, Se2Pose(0, 0, 0.2)))
    assert len(rows) > 0


def test_flow_examples():
    np.testing.assert_array_equal(pose_to_flow(SMALL, Se2Pose()), 0.0)
    flow = pose_to_flow(SMALL, Se2Pose(1.0, 0, 0))
    np.testing.assert_allclose(flow[..., 0], 1.0 / 0.5)
    np.testing.assert_allclose(flow[..., 1], 0.0, atol=1e-12)


def test_yaw_flow_grows_linearly_with_radius():
    spec = BevSpec(10.0, 10.0, 0.5)
    a = 0.1
    flow = pose_to_flow(spec, Se2Pose(0, 0, a))
    x, y = spec.pixel_centers()
    radius = np.hypot(x, y) / spec.resolution
    mag = np.hypot(flow[..., 0], flow[..., 1])
    np.testing.assert_allclose(mag, 2 * radius * math.sin(a / 2), rtol=1e-9)


def test_warp_by_flow_examples():
    g = random_grid(6)
    np.testing.assert_array_equal(warp_by_flow(g, np.zeros((24, 12, 2))).data, g.data)
    flow = np.zeros((24, 12, 2))
    flow[..., 1] = 1.0
    out = warp_by_flow(g, flow, "nearest")
    np.testing.assert_array_equal(out.data[:, :-1], g.data[:, 1:])
    with pytest.raises(ValueError):
        warp_by_flow(g, np.zeros((3, 3, 2)))


@settings(max_examples=25, deadline=None)
@given(st.floats(-2, 2), st.floats(-1, 1), st.floats(-0.3, 0.3))
def test_flow_matches_pose_warp(x, y, yaw):
    g = random_grid(7)
    d = Se2Pose(x, y, yaw)
    a = warp_by_pose(g, d).data
    b = warp_by_flow(g, pose_to_flow(g.spec, d)).data
    assert np.abs(a - b).max() <= 1e-6


def test_compress_channels():
    f = np.arange(2 * 2 * 6, dtype=float).reshape(2, 2, 6)
    k = compress_channels(f, 3)
    assert k.shape == (2, 2, 3)
    np.testing.assert_allclose(k[..., 0], f[..., :2].mean(axis=2))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 16))
def test_projector_idempotent(seed, rank):
    f = np.random.default_rng(seed).normal(size=(8, 8, 32))
    once = low_rank_project(f, rank)
    bases = compress_channels(f, rank)
    twice = low_rank_project(once, rank, bases)
    assert np.abs(twice - once).max() <= 1e-8 * max(1.0, np.abs(once).max())


def test_projector_fixes_range():
    rng = np.random.default_rng(8)
    bases = rng.normal(size=(10, 10, 16))
    f = np.einsum("hwk,kd->hwd", bases, rng.normal(size=(16, 64)))
    np.testing.assert_allclose(low_rank_project(f, 16, bases), f, atol=1e-8)


def test_projector_rank_and_linearity():
    rng = np.random.default_rng(9)
    f = rng.normal(size=(16, 16, 128))
    out = low_rank_project(f, 16)
    s = np.linalg.svd(out.reshape(-1, 128), compute_uv=False)
    assert s[16] <= 1e-6 * s[0]
    bases = rng.normal(size=(16, 16, 4))
    g = rng.normal(size=f.shape)
    lhs = low_rank_project(2 * f + g, 4, bases)
    rhs = 2 * low_rank_project(f, 4, bases) + low_rank_project(g, 4, bases)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_projector_tolerates_parallel_bases():
    rng = np.random.default_rng(10)
    b = rng.normal(size=(6, 6, 1))
    bases = np.concatenate([b, 2 * b], axis=2)
    out = low_rank_project(rng.normal(size=(6, 6, 5)), 2, bases)
    assert np.all(np.isfinite(out))


def test_projector_rejects_bad_rank():
    with pytest.raises(ValueError):
        low_rank_project(np.zeros((4, 4, 8)), 0)
    with pytest.raises(ValueError):
        low_rank_project(np.zeros((4, 4, 8)), 9)


def _generic(g, d, interp):
    from bevloc.bevops import source_coords
    rows, cols = source_coords(g.spec, d)
    out = np.empty(g.data.shape)
    fill = fill_values(g.channels)
    for ch in range(g.channels):
        out[..., ch] = ndimage.map_coordinates(g.data[..., ch] - fill[ch], [rows, cols], order=_ORDERS[interp],
                                               mode="grid-constant", cval=0.0, prefilter=interp == "cubic") + fill[ch]
    return out


_ORDERS = {"bilinear": 1, "cubic": 3}


@settings(max_examples=25, deadline=None)
@given(st.floats(-8, 8), st.floats(-4, 4), st.floats(-0.5, 0.5))
def test_cached_cubic_warp_matches_map_coordinates(x, y, yaw):
    g = random_grid(11)
    d = Se2Pose(x, y, yaw)
    np.testing.assert_allclose(warp_by_pose(g, d, "cubic").data, _generic(g, d, "cubic"), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.floats(-15, 15), st.floats(-8, 8)), min_size=1, max_size=4))
def test_translation_fast_path_matches_map_coordinates(shifts):
    g = random_grid(12)
    deltas = [Se2Pose(x, y, 0.0) for x, y in shifts]
    for d, got in zip(deltas, warp_many(g, deltas, "bilinear")):
        np.testing.assert_allclose(got, _generic(g, d, "bilinear"), atol=1e-12)
