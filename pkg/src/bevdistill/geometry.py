"""Rotated-box BEV geometry, grid transforms and Gaussian heatmap masks."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, gather_bilinear, reshape

# Box-frame crucial points in units of (length/2, width/2): four corners
# counter-clockwise from (+, +), the four edge midpoints m12, m23, m34, m41,
# then the center.
_CANONICAL = np.array(
    [
        [1.0, 1.0],
        [-1.0, 1.0],
        [-1.0, -1.0],
        [1.0, -1.0],
        [0.0, 1.0],
        [-1.0, 0.0],
        [0.0, -1.0],
        [1.0, 0.0],
        [0.0, 0.0],
    ]
)

DEFAULT_MIN_OVERLAP = 0.1
MASK_FLOOR = 1e-4


@dataclass(frozen=True)
class RotatedBox:
    cx: float
    cy: float
    length: float
    width: float
    yaw: float
    class_id: int = 0

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0):
            raise ValueError(f"box dimensions must be positive, got {self.length} x {self.width}")


@dataclass(frozen=True)
class GridSpec:
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    H: int
    W: int

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError(f"degenerate grid extent: {self}")
        if self.H < 1 or self.W < 1:
            raise ValueError(f"grid needs at least one cell, got {self.H}x{self.W}")

    @property
    def cell_x(self) -> float:
        return (self.x_max - self.x_min) / self.W

    @property
    def cell_y(self) -> float:
        return (self.y_max - self.y_min) / self.H

    def contains(self, x, y):
        return (x >= self.x_min) & (x < self.x_max) & (y >= self.y_min) & (y < self.y_max)


def wrap_angle(a):
    """Map angles onto (-pi, pi]."""
    out = np.pi - np.mod(np.pi - np.asarray(a, dtype=np.float64), 2 * np.pi)
    return float(out) if np.ndim(out) == 0 else out


def box_frame_points(box: RotatedBox) -> np.ndarray:
    return _CANONICAL * np.array([box.length / 2, box.width / 2])


def rotate(points: np.ndarray, theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return points @ np.array([[c, s], [-s, c]])


def crucial_points(box: RotatedBox) -> np.ndarray:
    """The 9 crucial points of ``box`` in world meters, shape ``(9, 2)``."""
    return rotate(box_frame_points(box), box.yaw) + np.array([box.cx, box.cy])


def corners(box: RotatedBox) -> np.ndarray:
    return crucial_points(box)[:4]


def footprint_extent(box: RotatedBox) -> tuple[float, float]:
    """Axis-aligned (x, y) extent of the rotated footprint in meters."""
    c, s = abs(math.cos(box.yaw)), abs(math.sin(box.yaw))
    return box.length * c + box.width * s, box.length * s + box.width * c


def points_in_box(points: np.ndarray, box: RotatedBox, margin: float = 0.0) -> np.ndarray:
    local = rotate(np.asarray(points, dtype=np.float64)[:, :2] - [box.cx, box.cy], -box.yaw)
    return (np.abs(local[:, 0]) <= box.length / 2 + margin) & (np.abs(local[:, 1]) <= box.width / 2 + margin)


def world_to_grid(p, g: GridSpec):
    """World meters -> continuous (row, col) under the cell-center convention.

    Accepts a single ``(x, y)`` or an ``(N, 2)`` array. Returns
    ``(row, col, in_bounds)``.
    """
    p = np.asarray(p, dtype=np.float64)
    x, y = p[..., 0], p[..., 1]
    row = (y - g.y_min) / (g.y_max - g.y_min) * g.H - 0.5
    col = (x - g.x_min) / (g.x_max - g.x_min) * g.W - 0.5
    inside = (row >= 0) & (row <= g.H - 1) & (col >= 0) & (col <= g.W - 1)
    return row, col, inside


def grid_to_world(row, col, g: GridSpec):
    x = (np.asarray(col, dtype=np.float64) + 0.5) / g.W * (g.x_max - g.x_min) + g.x_min
    y = (np.asarray(row, dtype=np.float64) + 0.5) / g.H * (g.y_max - g.y_min) + g.y_min
    return x, y


def crucial_grid_coords(boxes, g: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Row/col coordinates of every box's crucial points, shape ``(len(boxes), 9)`` each."""
    if not boxes:
        return np.zeros((0, 9)), np.zeros((0, 9))
    pts = np.stack([crucial_points(b) for b in boxes])
    row, col, _ = world_to_grid(pts, g)
    return row, col


def bilinear_sample(fmap: Tensor, rc) -> Tensor:
    """Sample ``fmap`` ``[C,H,W]`` at continuous grid coords; clamps out-of-grid
    positions to the border. ``rc`` is one ``(row, col)`` pair -> ``[C]``, or an
    ``(N, 2)`` array -> ``[N, C]``."""
    rc = np.asarray(rc, dtype=np.float64)
    single = rc.ndim == 1
    rc = rc.reshape(-1, 2)
    out = gather_bilinear(fmap, rc[:, 0], rc[:, 1])
    if single:
        return reshape(out, (fmap.shape[0],))
    return out


def gaussian_radius_raw(height: float, width: float, min_overlap: float = DEFAULT_MIN_OVERLAP) -> float:
    """CenterNet radius: smallest root over the three box-overlap quadratics."""
    a1 = 1.0
    b1 = height + width
    c1 = width * height * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 + math.sqrt(b1**2 - 4 * a1 * c1)) / 2

    a2 = 4.0
    b2 = 2 * (height + width)
    c2 = (1 - min_overlap) * width * height
    r2 = (b2 + math.sqrt(b2**2 - 4 * a2 * c2)) / 2

    a3 = 4 * min_overlap
    b3 = -2 * min_overlap * (height + width)
    c3 = (min_overlap - 1) * width * height
    r3 = (b3 + math.sqrt(b3**2 - 4 * a3 * c3)) / 2
    return min(r1, r2, r3)


def gaussian_radius(box: RotatedBox, g: GridSpec, min_overlap: float = DEFAULT_MIN_OVERLAP) -> int:
    """Integer splat radius in cells, floored at 1."""
    if not 0 < min_overlap < 1:
        raise ValueError(f"min_overlap must lie in (0, 1), got {min_overlap}")
    ex, ey = footprint_extent(box)
    r = gaussian_radius_raw(ey / g.cell_y, ex / g.cell_x, min_overlap)
    return max(1, int(r))


def center_cell(box: RotatedBox, g: GridSpec) -> tuple[int, int]:
    row, col, _ = world_to_grid((box.cx, box.cy), g)
    return int(np.floor(row + 0.5)), int(np.floor(col + 0.5))


def draw_gaussian(mask: np.ndarray, center: tuple[int, int], radius: int) -> np.ndarray:
    """Max-combine a truncated Gaussian splat (sigma = radius/3) into ``mask``.

    Returns a new array; values under 1e-4 inside the window are zeroed.
    """
    radius = int(radius)
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    out = np.array(mask, dtype=np.float64, copy=True)
    h, w = out.shape
    r, c = int(center[0]), int(center[1])
    if not (0 <= r < h and 0 <= c < w):
        return out
    sigma = radius / 3.0
    d = np.arange(-radius, radius + 1)
    splat = np.exp(-(d[:, None] ** 2 + d[None, :] ** 2) / (2 * sigma**2))
    splat[splat < MASK_FLOOR] = 0.0
    top, bottom = max(0, r - radius), min(h, r + radius + 1)
    left, right = max(0, c - radius), min(w, c + radius + 1)
    patch = splat[top - r + radius : bottom - r + radius, left - c + radius : right - c + radius]
    np.maximum(out[top:bottom, left:right], patch, out=out[top:bottom, left:right])
    return out


def gaussian_mask(boxes, g: GridSpec, min_overlap: float = DEFAULT_MIN_OVERLAP) -> np.ndarray:
    """Scene-level mask: one splat per box, max-combined."""
    mask = np.zeros((g.H, g.W))
    for b in boxes:
        mask = draw_gaussian(mask, center_cell(b, g), gaussian_radius(b, g, min_overlap))
    return mask
