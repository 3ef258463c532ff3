import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bevdistill.geometry import (
    GridSpec,
    RotatedBox,
    bilinear_sample,
    center_cell,
    corners,
    crucial_points,
    draw_gaussian,
    gaussian_mask,
    gaussian_radius,
    gaussian_radius_raw,
    grid_to_world,
    world_to_grid,
)
from bevdistill.tensor import Tensor

G = GridSpec(-8.0, 8.0, -8.0, 8.0, 16, 16)

coord = st.floats(-6, 6, allow_nan=False)
size = st.floats(0.3, 6.0, allow_nan=False)
angle = st.floats(-math.pi, math.pi, allow_nan=False)
boxes = st.builds(RotatedBox, coord, coord, size, size, angle)


def test_box_validation():
    with pytest.raises(ValueError):
        RotatedBox(0, 0, 0.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        GridSpec(1, 1, 0, 1, 4, 4)
    with pytest.raises(ValueError):
        GridSpec(0, 1, 0, 1, 0, 4)


def test_crucial_points_axis_aligned():
    pts = crucial_points(RotatedBox(0, 0, 4, 2, 0))
    expected = [[2, 1], [-2, 1], [-2, -1], [2, -1], [0, 1], [-2, 0], [0, -1], [2, 0], [0, 0]]
    np.testing.assert_array_equal(pts, expected)


def test_crucial_points_quarter_turn():
    p0 = crucial_points(RotatedBox(0, 0, 4, 2, 0))
    p90 = crucial_points(RotatedBox(0, 0, 4, 2, math.pi / 2))
    np.testing.assert_allclose(p90[:4], [[-1, 2], [-1, -2], [1, -2], [1, 2]], atol=1e-15)
    rot = np.array([[0.0, -1.0], [1.0, 0.0]])
    np.testing.assert_allclose(p90, p0 @ rot.T, atol=1e-15)


def test_crucial_points_matches_rotation_oracle():
    box = RotatedBox(3, -1, 2, 1, 0.3)
    canon = np.array([[1, 0.5], [-1, 0.5], [-1, -0.5], [1, -0.5], [0, 0.5], [-1, 0], [0, -0.5], [1, 0], [0, 0]])
    c, s = math.cos(0.3), math.sin(0.3)
    want = [(3 + c * x - s * y, -1 + s * x + c * y) for x, y in canon]
    np.testing.assert_allclose(crucial_points(box), want, atol=1e-14)
    # frozen values
    np.testing.assert_allclose(crucial_points(box)[0], [3.8075763858, -0.2268115488], atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(boxes, coord, coord, angle)
def test_crucial_points_equivariance(box, dx, dy, theta):
    p = crucial_points(box)
    moved = RotatedBox(box.cx + dx, box.cy + dy, box.length, box.width, box.yaw)
    np.testing.assert_allclose(crucial_points(moved), p + [dx, dy], atol=1e-12)
    turned = RotatedBox(box.cx, box.cy, box.length, box.width, box.yaw + theta)
    c, s = math.cos(theta), math.sin(theta)
    centered = p - [box.cx, box.cy]
    want = centered @ np.array([[c, s], [-s, c]]) + [box.cx, box.cy]
    np.testing.assert_allclose(crucial_points(turned), want, atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(boxes)
def test_midpoints_and_center_consistent(box):
    p = crucial_points(box)
    assert p.shape == (9, 2)
    c = corners(box)
    for k in range(4):
        np.testing.assert_allclose(p[4 + k], (c[k] + c[(k + 1) % 4]) / 2, atol=1e-12)
    np.testing.assert_allclose(p[8], c.mean(axis=0), atol=1e-12)


def test_world_to_grid_conventions():
    g = GridSpec(-10, 30, 0, 20, 8, 10)
    r, c, inside = world_to_grid((10.0, 10.0), g)
    assert (r, c) == (3.5, 4.5) and inside
    r, c, inside = world_to_grid((-10 + 2.0, 0 + 1.25), g)
    assert (r, c) == (0.0, 0.0) and inside
    _, _, inside = world_to_grid((-10.0, 0.0), g)
    assert not inside


@settings(max_examples=200, deadline=None)
@given(st.floats(-100, 100), st.floats(-100, 100))
def test_world_grid_round_trip(x, y):
    g = GridSpec(-18, 18, -12, 24, 24, 20)
    r, c, _ = world_to_grid((x, y), g)
    xx, yy = grid_to_world(r, c, g)
    assert abs(xx - x) <= 1e-9 and abs(yy - y) <= 1e-9


def test_bilinear_sample_basics():
    m = np.random.default_rng(0).normal(size=(3, 4, 5))
    np.testing.assert_array_equal(bilinear_sample(Tensor(m), (2, 3)).data, m[:, 2, 3])
    two = np.zeros((1, 1, 2))
    two[0, 0, 1] = 1.0
    assert bilinear_sample(Tensor(two), (0, 0.5)).data[0] == 0.5


def test_bilinear_sample_clamps_outside():
    m = np.arange(12.0).reshape(1, 3, 4)
    assert bilinear_sample(Tensor(m), (-3.0, -2.0)).data[0] == m[0, 0, 0]
    assert bilinear_sample(Tensor(m), (9.0, 9.0)).data[0] == m[0, 2, 3]


@settings(max_examples=100, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3), st.floats(0, 5), st.floats(0, 6))
def test_bilinear_exact_on_affine_maps(a, b, c, r, col):
    rows, cols = np.indices((6, 7))
    m = (a * rows + b * cols + c)[None]
    assert bilinear_sample(Tensor(m), (r, col)).data[0] == pytest.approx(a * r + b * col + c, abs=1e-12)


def quad_roots(h, w, o):
    def root(a, b, c):
        return (b + math.sqrt(b * b - 4 * a * c)) / 2

    return min(
        root(1, h + w, w * h * (1 - o) / (1 + o)),
        root(4, 2 * (h + w), (1 - o) * w * h),
        root(4 * o, -2 * o * (h + w), (o - 1) * w * h),
    )


def test_gaussian_radius_cases():
    assert gaussian_radius(RotatedBox(0, 0, 0.01, 0.01, 0), G) == 1
    assert gaussian_radius_raw(5, 5, 0.999999) < 0.01
    # 10 x 6 cell footprint on 1 m cells: x extent 10, y extent 6
    raw = gaussian_radius_raw(6, 10, 0.1)
    assert raw == pytest.approx(quad_roots(6, 10, 0.1), rel=1e-14)
    assert raw == pytest.approx(3.3152822910, abs=1e-9)
    g = GridSpec(-16, 16, -16, 16, 32, 32)
    assert gaussian_radius(RotatedBox(0, 0, 10, 6, 0), g, 0.1) == int(raw)
    with pytest.raises(ValueError):
        gaussian_radius(RotatedBox(0, 0, 1, 1, 0), G, 1.0)


def test_draw_gaussian_center_and_window():
    m = draw_gaussian(np.zeros((9, 9)), (4, 4), 2)
    assert m[4, 4] == 1.0
    sigma = 2 / 3
    for dr in range(-2, 3):
        for dc in range(-2, 3):
            v = math.exp(-(dr * dr + dc * dc) / (2 * sigma**2))
            assert m[4 + dr, 4 + dc] == pytest.approx(v if v >= 1e-4 else 0.0, rel=1e-14)
    assert m[4, 7] == 0 and m[1, 4] == 0


def test_draw_gaussian_max_combine_and_noop():
    a = draw_gaussian(np.zeros((10, 10)), (3, 3), 3)
    b = draw_gaussian(np.zeros((10, 10)), (5, 4), 2)
    both = draw_gaussian(a, (5, 4), 2)
    np.testing.assert_array_equal(both, np.maximum(a, b))
    base = np.zeros((5, 5))
    np.testing.assert_array_equal(draw_gaussian(base, (20, 20), 3), base)
    with pytest.raises(ValueError):
        draw_gaussian(base, (2, 2), 0)


@settings(max_examples=100, deadline=None)
@given(st.lists(boxes, min_size=1, max_size=5))
def test_gaussian_mask_properties(bs):
    m = gaussian_mask(bs, G)
    assert m.min() >= 0 and m.max() <= 1
    for b in bs:
        r, c = center_cell(b, G)
        if 0 <= r < G.H and 0 <= c < G.W:
            assert m[r, c] == 1.0
    covered = np.zeros_like(m, dtype=bool)
    for b in bs:
        r, c = center_cell(b, G)
        rad = gaussian_radius(b, G)
        covered[max(0, r - rad) : max(0, r + rad + 1), max(0, c - rad) : max(0, c + rad + 1)] = True
    assert np.all(m[~covered] == 0)


@settings(max_examples=50, deadline=None)
@given(boxes)
def test_single_splat_non_increasing_along_axes(b):
    r, c = center_cell(b, G)
    if not (0 <= r < G.H and 0 <= c < G.W):
        return
    m = gaussian_mask([b], G)
    assert np.all(np.diff(m[r, c:]) <= 0) and np.all(np.diff(m[r, : c + 1]) >= 0)
    assert np.all(np.diff(m[r:, c]) <= 0) and np.all(np.diff(m[: r + 1, c]) >= 0)
