"""Seeded synthetic BEV scenes with lidar-like and camera-like observations.

Lidar sees sharp, sparse evidence (points inside boxes, range dropout);
camera sees a dense but blurred footprint whose noise grows with range.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import GridSpec, RotatedBox, footprint_extent, points_in_box, rotate

log = logging.getLogger(__name__)

JITTER_SIGMA = 0.05
MAX_ATTEMPTS = 100
_SUBSAMPLE = 4


@dataclass(frozen=True)
class ClassSpec:
    class_id: int
    length_range: tuple[float, float]
    width_range: tuple[float, float]
    weight: float
    intensity: float = 0.5


def _default_grid() -> GridSpec:
    return GridSpec(-18.0, 18.0, -18.0, 18.0, 24, 24)


def _default_classes() -> tuple[ClassSpec, ...]:
    return (
        ClassSpec(0, (3.8, 5.0), (1.7, 2.1), 0.5, 0.6),  # car
        ClassSpec(1, (6.0, 9.0), (2.3, 2.8), 0.2, 0.85),  # truck
        ClassSpec(2, (0.6, 1.2), (0.6, 1.0), 0.3, 0.3),  # pedestrian
    )


@dataclass(frozen=True)
class SceneGenParams:
    grid: GridSpec = field(default_factory=_default_grid)
    classes: tuple[ClassSpec, ...] = field(default_factory=_default_classes)
    min_boxes: int = 2
    max_boxes: int = 8
    lidar_density: float = 6.0  # points / m^2 inside boxes
    clutter_density: float = 0.02  # points / m^2 over the region
    dropout: float = 0.03  # survival exp(-dropout * range)
    intensity_noise: float = 0.1
    camera_blur: int = 3  # box-blur width in cells
    camera_noise_base: float = 0.02
    camera_noise_slope: float = 0.01  # per meter of range
    seed: int = 0

    def __post_init__(self):
        if not self.classes or sum(c.weight for c in self.classes) <= 0:
            raise ValueError("class weights must sum to a positive value")
        if not 0 <= self.min_boxes <= self.max_boxes:
            raise ValueError(f"bad box count range [{self.min_boxes}, {self.max_boxes}]")
        for c in self.classes:
            if not (0 < c.length_range[0] <= c.length_range[1] and 0 < c.width_range[0] <= c.width_range[1]):
                raise ValueError(f"dimension ranges must be positive: {c}")
        if self.camera_blur < 1:
            raise ValueError("camera_blur must be >= 1")

    @property
    def num_classes(self) -> int:
        return max(c.class_id for c in self.classes) + 1

    def to_dict(self) -> dict:
        g = self.grid
        return {
            "grid": [g.x_min, g.x_max, g.y_min, g.y_max, g.H, g.W],
            "classes": [[c.class_id, list(c.length_range), list(c.width_range), c.weight, c.intensity] for c in self.classes],
            **{k: getattr(self, k) for k in (
                "min_boxes", "max_boxes", "lidar_density", "clutter_density", "dropout", "intensity_noise",
                "camera_blur", "camera_noise_base", "camera_noise_slope", "seed",
            )},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneGenParams":
        d = dict(d)
        if "grid" in d:
            x0, x1, y0, y1, h, w = d["grid"]
            d["grid"] = GridSpec(float(x0), float(x1), float(y0), float(y1), int(h), int(w))
        if "classes" in d:
            d["classes"] = tuple(ClassSpec(int(i), tuple(lr), tuple(wr), float(wt), float(it)) for i, lr, wr, wt, it in d["classes"])
        return cls(**d)


@dataclass
class Scene:
    id: int
    boxes: list[RotatedBox]
    lidar_points: np.ndarray  # (N, 3): x, y, intensity
    camera_obs: np.ndarray  # (H, W)
    underfilled: bool = field(default=False, compare=False)

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.id == other.id
            and self.boxes == other.boxes
            and self.lidar_points.shape == other.lidar_points.shape
            and np.array_equal(self.lidar_points, other.lidar_points)
            and self.camera_obs.shape == other.camera_obs.shape
            and np.array_equal(self.camera_obs, other.camera_obs)
        )


def scene_rng(seed: int, scene_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(scene_id)]))


def _sample_boxes(params: SceneGenParams, rng: np.random.Generator) -> tuple[list[RotatedBox], bool]:
    g = params.grid
    target = int(rng.integers(params.min_boxes, params.max_boxes + 1))
    weights = np.array([c.weight for c in params.classes], dtype=np.float64)
    weights /= weights.sum()
    boxes: list[RotatedBox] = []
    attempts = 0
    # The class is drawn once per slot and only the placement is retried, so
    # rejections do not skew class frequencies toward small objects.
    while len(boxes) < target and attempts < MAX_ATTEMPTS:
        spec = params.classes[int(rng.choice(len(params.classes), p=weights))]
        while attempts < MAX_ATTEMPTS:
            attempts += 1
            length = float(rng.uniform(*spec.length_range))
            width = float(rng.uniform(*spec.width_range))
            yaw = float(np.pi - rng.uniform(0.0, 2 * np.pi))
            cx = float(rng.uniform(g.x_min, g.x_max))
            cy = float(rng.uniform(g.y_min, g.y_max))
            half = math.hypot(length, width) / 2
            if all(math.hypot(cx - b.cx, cy - b.cy) >= half + math.hypot(b.length, b.width) / 2 for b in boxes):
                boxes.append(RotatedBox(cx, cy, length, width, yaw, spec.class_id))
                break
    underfilled = len(boxes) < params.min_boxes
    if underfilled:
        log.warning("scene under-filled: %d boxes after %d attempts", len(boxes), attempts)
    return boxes, underfilled


def render_lidar(boxes: Sequence[RotatedBox], params: SceneGenParams, rng: np.random.Generator) -> np.ndarray:
    """Points inside box footprints plus background clutter, thinned by range."""
    g = params.grid
    intensity = {c.class_id: c.intensity for c in params.classes}
    chunks = []
    for b in boxes:
        n = int(rng.poisson(params.lidar_density * b.length * b.width))
        local = rng.uniform(-0.5, 0.5, size=(n, 2)) * [b.length, b.width]
        xy = rotate(local, b.yaw) + [b.cx, b.cy]
        inten = intensity.get(b.class_id, 0.5) + params.intensity_noise * rng.standard_normal(n)
        chunks.append(np.column_stack([xy, inten]))
    area = (g.x_max - g.x_min) * (g.y_max - g.y_min)
    n_clutter = int(rng.poisson(params.clutter_density * area))
    cx = rng.uniform(g.x_min, g.x_max, n_clutter)
    cy = rng.uniform(g.y_min, g.y_max, n_clutter)
    chunks.append(np.column_stack([cx, cy, rng.uniform(0.0, 1.0, n_clutter)]))
    pts = np.concatenate(chunks) if chunks else np.zeros((0, 3))
    survive = rng.uniform(size=len(pts)) < np.exp(-params.dropout * np.hypot(pts[:, 0], pts[:, 1]))
    pts = pts[survive]
    pts[:, :2] += JITTER_SIGMA * rng.standard_normal((len(pts), 2))
    return pts


def rasterize(boxes: Sequence[RotatedBox], g: GridSpec) -> np.ndarray:
    """Fraction of each cell covered by box footprints (4x4 supersampling, capped at 1)."""
    occ = np.zeros((g.H, g.W))
    if not boxes:
        return occ
    offs = (np.arange(_SUBSAMPLE) + 0.5) / _SUBSAMPLE
    rows, cols = np.indices((g.H, g.W))
    shape = (g.H, g.W, _SUBSAMPLE, _SUBSAMPLE)
    sub_r = np.broadcast_to(rows[..., None, None] + offs[:, None], shape).ravel()
    sub_c = np.broadcast_to(cols[..., None, None] + offs[None, :], shape).ravel()
    xy = np.column_stack([g.x_min + sub_c * g.cell_x, g.y_min + sub_r * g.cell_y])
    hit = np.zeros(len(xy), dtype=bool)
    for b in boxes:
        ex, ey = footprint_extent(b)
        near = (np.abs(xy[:, 0] - b.cx) <= ex / 2) & (np.abs(xy[:, 1] - b.cy) <= ey / 2)
        idx = np.nonzero(near)[0]
        hit[idx[points_in_box(xy[idx], b)]] = True
    return hit.reshape(g.H, g.W, _SUBSAMPLE * _SUBSAMPLE).mean(axis=-1)


def box_blur(img: np.ndarray, width: int) -> np.ndarray:
    """Normalized ``width x width`` box blur with zero padding (mass blurred past
    the border is lost)."""
    if width == 1:
        return img.copy()
    lo = (width - 1) // 2
    hi = width - 1 - lo
    out = img
    for axis in (0, 1):
        padded = np.pad(out, [(lo, hi) if a == axis else (0, 0) for a in range(2)], mode="constant")
        cs = np.cumsum(padded, axis=axis)
        cs = np.concatenate([np.zeros_like(cs.take([0], axis=axis)), cs], axis=axis)
        n = out.shape[axis]
        acc = cs.take(np.arange(width, width + n), axis=axis) - cs.take(np.arange(n), axis=axis)
        out = acc / width
    return out


def render_camera(boxes: Sequence[RotatedBox], params: SceneGenParams, rng: np.random.Generator) -> np.ndarray:
    """Blurred footprint density plus zero-mean noise growing with range, clamped at 0."""
    g = params.grid
    img = box_blur(rasterize(boxes, g), params.camera_blur)
    rows, cols = np.indices((g.H, g.W))
    x = g.x_min + (cols + 0.5) * g.cell_x
    y = g.y_min + (rows + 0.5) * g.cell_y
    sigma = params.camera_noise_base + params.camera_noise_slope * np.hypot(x, y)
    img = img + sigma * rng.standard_normal(img.shape)
    return np.maximum(img, 0.0)


def gen_scene(params: SceneGenParams, scene_id: int) -> Scene:
    rng = scene_rng(params.seed, scene_id)
    boxes, underfilled = _sample_boxes(params, rng)
    points = render_lidar(boxes, params, rng)
    camera = render_camera(boxes, params, rng)
    return Scene(int(scene_id), boxes, points, camera, underfilled)


def gen_scenes(params: SceneGenParams, count: int, start: int = 0) -> list[Scene]:
    return [gen_scene(params, i) for i in range(start, start + count)]


# ---------------------------------------------------------------------------
# scene files
# ---------------------------------------------------------------------------

SCENE_MAGIC = b"BEVSCENE"
SCENE_VERSION = 1


class SceneFileError(ValueError):
    pass


def save_scenes(path, scenes: Sequence[Scene]) -> None:
    """Binary scene container, all little-endian.

    magic, u32 version, u32 count, then per scene: i64 id, u32 box count,
    per box 6 x f64 (cx, cy, length, width, yaw, reserved 0.0) and i32 class
    id, u32 point count and point triples as f64, u32 H, u32 W and the
    camera grid as f64.
    """
    out = [SCENE_MAGIC, struct.pack("<II", SCENE_VERSION, len(scenes))]
    for s in scenes:
        out.append(struct.pack("<qI", s.id, len(s.boxes)))
        for b in s.boxes:
            out.append(struct.pack("<6di", b.cx, b.cy, b.length, b.width, b.yaw, 0.0, b.class_id))
        pts = np.ascontiguousarray(s.lidar_points, dtype="<f8").reshape(-1, 3)
        out.append(struct.pack("<I", len(pts)) + pts.tobytes())
        cam = np.ascontiguousarray(s.camera_obs, dtype="<f8")
        out.append(struct.pack("<II", *cam.shape) + cam.tobytes())
    Path(path).write_bytes(b"".join(out))


def load_scenes(path) -> list[Scene]:
    buf = Path(path).read_bytes()
    if buf[: len(SCENE_MAGIC)] != SCENE_MAGIC:
        raise SceneFileError(f"{path}: not a scene file (bad magic)")
    pos = len(SCENE_MAGIC)

    def read(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise SceneFileError(f"{path}: truncated at byte {pos}")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    def read_f64(n):
        nonlocal pos
        if pos + 8 * n > len(buf):
            raise SceneFileError(f"{path}: truncated at byte {pos}")
        arr = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).astype(np.float64)
        pos += 8 * n
        return arr

    version, count = read("<II")
    if version != SCENE_VERSION:
        raise SceneFileError(f"{path}: unsupported scene file version {version}")
    scenes = []
    for _ in range(count):
        sid, nbox = read("<qI")
        boxes = []
        for _ in range(nbox):
            cx, cy, length, width, yaw, _reserved, cid = read("<6di")
            try:
                boxes.append(RotatedBox(cx, cy, length, width, yaw, cid))
            except ValueError as exc:
                raise SceneFileError(f"{path}: corrupt box record in scene {sid}: {exc}") from None
        (npts,) = read("<I")
        pts = read_f64(3 * npts).reshape(npts, 3)
        h, w = read("<II")
        cam = read_f64(h * w).reshape(h, w)
        scenes.append(Scene(int(sid), boxes, pts, cam))
    if pos != len(buf):
        raise SceneFileError(f"{path}: {len(buf) - pos} trailing bytes")
    return scenes
