"""Toy BEV detectors for lidar, camera and fused inputs.

Every modality produces low-level BEV features, shares the same BEV encoder
and CenterPoint-style head layout, and is trained with a penalty-reduced
focal loss plus an L1 regression loss at box centers.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .geometry import GridSpec, RotatedBox, center_cell, draw_gaussian, gaussian_radius, grid_to_world, world_to_grid, wrap_angle
from .losses import BevFeatures, response_features
from .tensor import Tensor

MODALITIES = ("lidar", "camera", "fusion")
NUM_REG = 6
LIDAR_CHANNELS = 4
PROB_EPS = 1e-6
FOCAL_ALPHA = 2.0
FOCAL_BETA = 4.0
CLS_PRIOR_BIAS = -math.log((1 - 0.1) / 0.1)


@dataclass(frozen=True)
class HeadSpec:
    num_classes: int
    num_reg: int = NUM_REG

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("need at least one class")
        if self.num_reg != NUM_REG:
            raise ValueError(f"regression head has exactly {NUM_REG} targets")


@dataclass(frozen=True)
class Detection:
    box: RotatedBox
    score: float


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def _layer_shapes(modality: str, c_low: int, c_high: int, num_classes: int) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    if modality in ("lidar", "fusion"):
        shapes["lidar.conv"] = (c_low, LIDAR_CHANNELS, 3, 3)
    if modality in ("camera", "fusion"):
        shapes["camera.conv1"] = (c_low, 1, 3, 3)
        shapes["camera.conv2"] = (c_low, c_low, 3, 3)
    if modality == "fusion":
        shapes["fuse.conv"] = (c_low, 2 * c_low, 3, 3)
    shapes["bev.conv1"] = (c_high, c_low, 3, 3)
    shapes["bev.conv2"] = (c_high, c_high, 3, 3)
    shapes["head.shared"] = (c_high, c_high, 3, 3)
    shapes["head.cls"] = (num_classes, c_high, 1, 1)
    shapes["head.reg"] = (NUM_REG, c_high, 1, 1)
    return shapes


def init_params(modality: str, c_low: int, c_high: int, num_classes: int, rng: np.random.Generator) -> dict[str, Tensor]:
    """He-normal kernels, zero biases, classification bias at a 0.1 prior."""
    if modality not in MODALITIES:
        raise ValueError(f"unknown modality {modality!r}; expected one of {MODALITIES}")
    params = {}
    for layer, shape in _layer_shapes(modality, c_low, c_high, num_classes).items():
        fan_in = shape[1] * shape[2] * shape[3]
        w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
        b = np.full(shape[0], CLS_PRIOR_BIAS if layer == "head.cls" else 0.0)
        params[f"{layer}.w"] = Tensor(w, requires_grad=True, name=f"{layer}.w")
        params[f"{layer}.b"] = Tensor(b, requires_grad=True, name=f"{layer}.b")
    return params


class Detector:
    def __init__(self, modality: str, params: dict[str, Tensor], num_classes: int):
        if modality not in MODALITIES:
            raise ValueError(f"unknown modality {modality!r}")
        self.modality = modality
        self.params = params
        self.head = HeadSpec(num_classes)

    @classmethod
    def create(cls, modality: str, num_classes: int, c_low: int = 16, c_high: int = 32, seed: int = 0) -> "Detector":
        rng = np.random.default_rng(seed)
        return cls(modality, init_params(modality, c_low, c_high, num_classes, rng), num_classes)

    @classmethod
    def from_params(cls, params: dict[str, Tensor]) -> "Detector":
        if "fuse.conv.w" in params:
            modality = "fusion"
        elif "lidar.conv.w" in params:
            modality = "lidar"
        elif "camera.conv1.w" in params:
            modality = "camera"
        else:
            raise ValueError("checkpoint holds no modality encoder")
        return cls(modality, params, params["head.cls.w"].shape[0])

    @property
    def c_low(self) -> int:
        return self.params["bev.conv1.w"].shape[1]

    @property
    def c_high(self) -> int:
        return self.params["bev.conv1.w"].shape[0]

    def _conv(self, x: Tensor, layer: str, act: bool = True) -> Tensor:
        y = T.conv2d(x, self.params[f"{layer}.w"], self.params[f"{layer}.b"])
        return T.relu(y) if act else y

    def encode_lidar(self, scatter) -> Tensor:
        return self._conv(_as_input(scatter), "lidar.conv")

    def encode_camera(self, obs) -> Tensor:
        return self._conv(self._conv(_as_input(obs), "camera.conv1"), "camera.conv2")

    def fuse_low(self, lidar_low: Tensor, camera_low: Tensor) -> Tensor:
        if lidar_low.shape[-2:] != camera_low.shape[-2:]:
            raise T.ShapeError(f"fuse_low: spatial mismatch {lidar_low.shape} vs {camera_low.shape}")
        return self._conv(T.concat([lidar_low, camera_low], axis=-3), "fuse.conv")

    def low_features(self, inputs: dict) -> Tensor:
        if self.modality == "lidar":
            return self.encode_lidar(inputs["lidar"])
        if self.modality == "camera":
            return self.encode_camera(inputs["camera"])
        return self.fuse_low(self.encode_lidar(inputs["lidar"]), self.encode_camera(inputs["camera"]))

    def bev_encoder(self, low: Tensor) -> Tensor:
        if low.shape[-3] != self.c_low:
            raise T.ShapeError(f"bev_encoder: expected {self.c_low} channels, got {low.shape[-3]}")
        return self._conv(self._conv(low, "bev.conv1"), "bev.conv2")

    def det_head(self, high: Tensor) -> tuple[Tensor, Tensor]:
        shared = self._conv(high, "head.shared")
        cls = T.sigmoid(self._conv(shared, "head.cls", act=False))
        reg = self._conv(shared, "head.reg", act=False)
        return cls, reg

    def forward(self, inputs: dict, use_max: bool = True) -> BevFeatures:
        """Run the whole detector; ``inputs`` holds ``lidar`` scatter and/or
        ``camera`` observation arrays, per scene or batched."""
        low = self.low_features(inputs)
        high = self.bev_encoder(low)
        cls, reg = self.det_head(high)
        return BevFeatures(low, high, cls, reg, response_features(cls, reg, use_max))

    def save(self, path) -> None:
        save_checkpoint(path, self.params)

    @classmethod
    def load(cls, path) -> "Detector":
        return cls.from_params(load_checkpoint(path))


def _as_input(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# modality inputs
# ---------------------------------------------------------------------------


def lidar_scatter(points: np.ndarray, g: GridSpec) -> np.ndarray:
    """Pillar scatter of ``(x, y, intensity)`` points into ``[4, H, W]``.

    Channels: log1p(point count), mean intensity, mean in-cell x offset and
    mean in-cell y offset (in cells, relative to the cell center). Points
    outside the grid are dropped.
    """
    out = np.zeros((LIDAR_CHANNELS, g.H, g.W))
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    pts = pts[g.contains(pts[:, 0], pts[:, 1])]
    if len(pts) == 0:
        return out
    fx = (pts[:, 0] - g.x_min) / g.cell_x
    fy = (pts[:, 1] - g.y_min) / g.cell_y
    col = np.minimum(fx.astype(np.intp), g.W - 1)
    row = np.minimum(fy.astype(np.intp), g.H - 1)
    flat = row * g.W + col
    n = g.H * g.W
    count = np.bincount(flat, minlength=n)
    occupied = count > 0
    denom = np.where(occupied, count, 1)
    out[0] = np.log1p(count).reshape(g.H, g.W)
    for ch, vals in ((1, pts[:, 2]), (2, fx - col - 0.5), (3, fy - row - 0.5)):
        out[ch] = (np.bincount(flat, weights=vals, minlength=n) / denom).reshape(g.H, g.W)
    return out


# ---------------------------------------------------------------------------
# targets, loss, decoding
# ---------------------------------------------------------------------------


@dataclass
class Targets:
    heatmap: np.ndarray  # [C, H, W]
    reg: np.ndarray  # [6, H, W]
    reg_mask: np.ndarray  # [H, W]
    num_boxes: int


def encode_box(box: RotatedBox, g: GridSpec) -> tuple[tuple[int, int], np.ndarray]:
    """Center cell and the 6 regression targets of ``box``."""
    row, col, _ = world_to_grid((box.cx, box.cy), g)
    r, c = center_cell(box, g)
    target = np.array([col - c, row - r, math.log(box.length), math.log(box.width), math.sin(box.yaw), math.cos(box.yaw)])
    return (r, c), target


def build_targets(boxes: Sequence[RotatedBox], g: GridSpec, num_classes: int, min_overlap: float) -> Targets:
    heat = np.zeros((num_classes, g.H, g.W))
    reg = np.zeros((NUM_REG, g.H, g.W))
    mask = np.zeros((g.H, g.W))
    for b in boxes:
        (r, c), target = encode_box(b, g)
        if not (0 <= r < g.H and 0 <= c < g.W):
            continue
        heat[b.class_id] = draw_gaussian(heat[b.class_id], (r, c), gaussian_radius(b, g, min_overlap))
        reg[:, r, c] = target
        mask[r, c] = 1.0
    return Targets(heat, reg, mask, len(boxes))


def detection_loss_batch(cls: Tensor, reg: Tensor, targets: Sequence[Targets]) -> Tensor:
    """Mean over scenes of focal(cls) + L1(reg at centers), each normalized by
    the scene's box count (minimum 1). ``cls``/``reg`` are ``[N, *, H, W]``."""
    n = len(targets)
    heat = np.stack([t.heatmap for t in targets])
    norm = np.array([1.0 / (max(1, t.num_boxes) * n) for t in targets])[:, None, None, None]
    pos = (heat == 1.0) * norm
    negw = np.where(heat < 1.0, (1.0 - heat) ** FOCAL_BETA, 0.0) * norm
    p = T.clip(cls, PROB_EPS, 1 - PROB_EPS)
    q = 1.0 - p
    pos_term = T.mul(T.power(q, FOCAL_ALPHA), T.log(p))
    neg_term = T.mul(T.power(p, FOCAL_ALPHA), T.log(q))
    l_cls = T.neg(T.weighted_sum(pos_term, pos) + T.weighted_sum(neg_term, negw))
    regt = Tensor(np.stack([t.reg for t in targets]))
    regw = np.stack([t.reg_mask for t in targets]) * norm[:, 0]
    l_reg = T.l1_sum(reg, regt, regw)
    return l_cls + l_reg


def detection_loss(cls: Tensor, reg: Tensor, boxes: Sequence[RotatedBox], g: GridSpec, min_overlap: float = 0.1) -> Tensor:
    """L_Det for a single scene's ``[C,H,W]`` / ``[6,H,W]`` maps."""
    targets = build_targets(boxes, g, cls.shape[0], min_overlap)
    return detection_loss_batch(T.reshape(cls, (1,) + cls.shape), T.reshape(reg, (1,) + reg.shape), [targets])


def _local_peaks(score: np.ndarray) -> np.ndarray:
    h, w = score.shape
    padded = np.pad(score, 1, constant_values=-np.inf)
    neigh = np.stack([padded[i : i + h, j : j + w] for i in range(3) for j in range(3)])
    return score >= neigh.max(axis=0)


def decode(cls, reg, g: GridSpec, score_thresh: float = 0.1, max_dets: int = 100) -> list[Detection]:
    """Peak extraction on the channel-max heatmap followed by box reconstruction."""
    cls = cls.data if isinstance(cls, Tensor) else np.asarray(cls, dtype=np.float64)
    reg = reg.data if isinstance(reg, Tensor) else np.asarray(reg, dtype=np.float64)
    score = cls.max(axis=0)
    label = cls.argmax(axis=0)
    keep = _local_peaks(score) & (score > score_thresh)
    rows, cols = np.nonzero(keep)
    order = np.argsort(-score[rows, cols], kind="stable")[:max_dets]
    dets = []
    for i in order:
        r, c = rows[i], cols[i]
        dx, dy, ll, lw, s, co = reg[:, r, c]
        x, y = grid_to_world(r + dy, c + dx, g)
        box = RotatedBox(float(x), float(y), math.exp(ll), math.exp(lw), wrap_angle(math.atan2(s, co)), int(label[r, c]))
        dets.append(Detection(box, float(score[r, c])))
    return dets


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"BEVDCKPT"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: dict[str, Tensor]) -> None:
    """Write named float64 tensors in the versioned little-endian container.

    Layout: magic, u32 version, u32 tensor count, then per tensor u32 name
    length, UTF-8 name, u32 rank, rank x u64 extents, float64 payload.
    """
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(params))]
    for name, t in params.items():
        raw = name.encode("utf-8")
        data = np.ascontiguousarray(t.data, dtype="<f8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", data.ndim) + struct.pack(f"<{data.ndim}Q", *data.shape))
        chunks.append(data.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, Tensor]:
    buf = Path(path).read_bytes()
    if buf[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = len(CKPT_MAGIC)

    def read(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    version, count = read("<II")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    params = {}
    for _ in range(count):
        (nlen,) = read("<I")
        if pos + nlen > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = read("<I")
        shape = read(f"<{rank}Q")
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(buf):
            raise CheckpointError(f"{path}: truncated payload for {name!r}")
        data = np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape)
        pos += nbytes
        params[name] = Tensor(data.astype(np.float64), requires_grad=True, name=name)
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return params
