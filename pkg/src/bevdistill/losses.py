"""Feature, relation and response distillation losses over BEV maps.

All three losses pull the student toward a frozen teacher only around
ground-truth objects. Teacher maps are always detached before use, so no
gradient can reach a teacher even when it was produced on a tape.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .geometry import DEFAULT_MIN_OVERLAP, GridSpec, RotatedBox, crucial_grid_coords, gaussian_mask
from .tensor import Tensor

PATHS = ("l2c", "c2l", "f2l", "f2c")
MODES = ("crucial", "gaussian", "complete")
LEVELS = ("low", "high")

# (teacher modality, student modality) per distillation path
PATH_MODALITIES = {
    "l2c": ("lidar", "camera"),
    "c2l": ("camera", "lidar"),
    "f2l": ("fusion", "lidar"),
    "f2c": ("fusion", "camera"),
}

_DEFAULT_LAMBDAS = {
    "f2l": (10.0, 1.0, 10.0),
    "f2c": (10.0, 5.0, 10.0),
    "c2l": (10.0, 5.0, 1.0),
    "l2c": (100.0, 40.0, 10.0),
}


@dataclass
class BevFeatures:
    """One detector's maps for a scene (``[C,H,W]``) or a batch (``[N,C,H,W]``)."""

    low: Tensor
    high: Tensor
    cls: Tensor
    reg: Tensor
    resp: Tensor

    def scene(self, n: int) -> "BevFeatures":
        return BevFeatures(*(T.take(m, n) for m in (self.low, self.high, self.cls, self.reg, self.resp)))

    def detached(self) -> "BevFeatures":
        return BevFeatures(*(m.detach() for m in (self.low, self.high, self.cls, self.reg, self.resp)))


@dataclass(frozen=True)
class DistillWeights:
    lambda1: float = 0.0
    lambda2: float = 0.0
    lambda3: float = 0.0

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError(f"distillation weights must be nonnegative: {self}")


def default_weights(path: str) -> DistillWeights:
    try:
        return DistillWeights(*_DEFAULT_LAMBDAS[path.lower()])
    except KeyError:
        raise ValueError(f"unknown distillation path {path!r}; expected one of {PATHS}") from None


@dataclass(frozen=True)
class DistillConfig:
    path: str = "f2c"
    weights: DistillWeights = field(default_factory=DistillWeights)
    adapt_low: bool = False
    adapt_high: bool = False
    fea_mode: str = "crucial"
    rel_mode: str = "crucial"
    resp_mode: str = "gaussian"
    fea_level: str = "low"
    rel_level: str = "high"
    resp_use_max: bool = True
    min_overlap: float = DEFAULT_MIN_OVERLAP

    def __post_init__(self):
        if self.path not in PATHS:
            raise ValueError(f"unknown distillation path {self.path!r}; expected one of {PATHS}")
        for name in ("fea_mode", "rel_mode", "resp_mode"):
            if getattr(self, name) not in MODES:
                raise ValueError(f"{name} must be one of {MODES}, got {getattr(self, name)!r}")
        for name in ("fea_level", "rel_level"):
            if getattr(self, name) not in LEVELS:
                raise ValueError(f"{name} must be one of {LEVELS}, got {getattr(self, name)!r}")

    @classmethod
    def for_path(cls, path: str, **overrides) -> "DistillConfig":
        """Defaults for ``path``: its lambda triple, adaptive layers only for c2l."""
        path = path.lower()
        adapt = path == "c2l"
        base = cls(path=path, weights=default_weights(path), adapt_low=adapt, adapt_high=adapt)
        return replace(base, **overrides)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DistillConfig":
        d = dict(d)
        d["weights"] = DistillWeights(**d.get("weights", {}))
        return cls(**d)


class AdaptLayer:
    """Removable 1x1 convolution applied to student maps before alignment.

    Starts as the identity mapping, so switching it on does not change the
    loss at step 0.
    """

    def __init__(self, channels_in: int, channels_out: int | None = None, enabled: bool = True, name: str = "adapt"):
        channels_out = channels_in if channels_out is None else channels_out
        kernel = np.zeros((channels_out, channels_in, 1, 1))
        n = min(channels_in, channels_out)
        kernel[np.arange(n), np.arange(n), 0, 0] = 1.0
        self.kernel = Tensor(kernel, requires_grad=True, name=f"{name}.w")
        self.bias = Tensor(np.zeros(channels_out), requires_grad=True, name=f"{name}.b")
        self.enabled = enabled
        self.name = name

    def apply(self, x: Tensor) -> Tensor:
        if not self.enabled:
            return x
        return T.conv2d(x, self.kernel, self.bias)

    def params(self) -> dict[str, Tensor]:
        return {self.kernel.name: self.kernel, self.bias.name: self.bias} if self.enabled else {}


def _teacher(t) -> Tensor:
    return t.detach() if isinstance(t, Tensor) else Tensor(t)


def _zero() -> Tensor:
    return Tensor(0.0)


def _adapt(student: Tensor, adapt: AdaptLayer | None, teacher: Tensor, op: str) -> Tensor:
    if adapt is not None:
        student = adapt.apply(student)
    if student.shape[0] != teacher.shape[0]:
        raise T.ShapeError(f"{op}: teacher has {teacher.shape[0]} channels, student {student.shape[0]}")
    return student


def _cell_coords(h: int, w: int, mask: np.ndarray | None = None):
    rows, cols = np.indices((h, w))
    if mask is None:
        return rows.ravel(), cols.ravel()
    keep = mask > 0
    return rows[keep], cols[keep]


def feature_distill(
    teacher_low,
    student_low: Tensor,
    boxes: Sequence[RotatedBox],
    g: GridSpec,
    adapt: AdaptLayer | None = None,
    mode: str = "crucial",
    min_overlap: float = DEFAULT_MIN_OVERLAP,
) -> Tensor:
    """Point-wise L1 alignment of two ``[C,H,W]`` feature maps.

    ``crucial``: per box, the mean over its 9 crucial points of the
    channel-summed absolute difference, then the mean over boxes.
    ``complete``: channel-summed difference averaged over every cell.
    ``gaussian``: the same, weighted by the scene's Gaussian mask.
    """
    teacher = _teacher(teacher_low)
    student = _adapt(student_low, adapt, teacher, "feature_distill")
    if mode == "complete":
        return T.scale(T.l1_sum(teacher, student), 1.0 / (g.H * g.W))
    if not boxes:
        return _zero()
    if mode == "gaussian":
        mask = gaussian_mask(boxes, g, min_overlap)
        return T.scale(T.l1_sum(teacher, student, mask), 1.0 / mask.sum())
    if mode != "crucial":
        raise ValueError(f"unknown feature distillation mode {mode!r}")
    rows, cols = crucial_grid_coords(boxes, g)
    ft = T.gather_bilinear(teacher, rows, cols)
    fs = T.gather_bilinear(student, rows, cols)
    return T.scale(T.l1_sum(ft, fs), 1.0 / rows.size)


def relation_matrix(high: Tensor, box: RotatedBox, g: GridSpec) -> Tensor:
    """9x9 cosine similarities between the features at ``box``'s crucial points."""
    rows, cols = crucial_grid_coords([box], g)
    return T.cosine_matrix(T.gather_bilinear(high, rows, cols))


def relation_distill(
    teacher_high,
    student_high: Tensor,
    boxes: Sequence[RotatedBox],
    g: GridSpec,
    adapt: AdaptLayer | None = None,
    mode: str = "crucial",
    min_overlap: float = DEFAULT_MIN_OVERLAP,
) -> Tensor:
    """L1 distance between teacher and student relation matrices.

    ``crucial`` averages the 81 entries of each box's matrix and then over
    boxes. ``complete`` and ``gaussian`` build one scene-level matrix over all
    cells (or over masked cells, pair-weighted by ``mask_i * mask_j``) and
    normalize by the total pair weight.
    """
    teacher = _teacher(teacher_high)
    student = _adapt(student_high, adapt, teacher, "relation_distill")
    h, w = g.H, g.W
    if mode == "complete":
        rows, cols = _cell_coords(h, w)
        st = T.cosine_matrix(T.gather_bilinear(teacher, rows, cols))
        ss = T.cosine_matrix(T.gather_bilinear(student, rows, cols))
        return T.scale(T.l1_sum(st, ss), 1.0 / rows.size**2)
    if not boxes:
        return _zero()
    if mode == "gaussian":
        mask = gaussian_mask(boxes, g, min_overlap)
        rows, cols = _cell_coords(h, w, mask)
        wts = mask[rows, cols]
        pair = np.outer(wts, wts)
        st = T.cosine_matrix(T.gather_bilinear(teacher, rows, cols))
        ss = T.cosine_matrix(T.gather_bilinear(student, rows, cols))
        return T.scale(T.l1_sum(st, ss, pair), 1.0 / pair.sum())
    if mode != "crucial":
        raise ValueError(f"unknown relation distillation mode {mode!r}")
    rows, cols = crucial_grid_coords(boxes, g)
    nb = len(boxes)
    c = teacher.shape[0]
    st = T.cosine_matrix(T.reshape(T.gather_bilinear(teacher, rows, cols), (nb, 9, c)))
    ss = T.cosine_matrix(T.reshape(T.gather_bilinear(student, rows, cols), (nb, 9, c)))
    return T.scale(T.l1_sum(st, ss), 1.0 / (81 * nb))


def response_features(cls: Tensor, reg: Tensor, use_max: bool = True) -> Tensor:
    """Concatenate the classification heatmap (channel-max by default) with the
    regression map along the channel axis. Works for ``[C,H,W]`` and batched input."""
    if use_max:
        top = T.max_over_channel(cls)
        cls = T.reshape(top, top.shape[:-2] + (1,) + top.shape[-2:])
    return T.concat([cls, reg], axis=-3)


def response_mask(boxes: Sequence[RotatedBox], g: GridSpec, mode: str = "gaussian", min_overlap: float = DEFAULT_MIN_OVERLAP) -> np.ndarray:
    if mode == "complete":
        return np.ones((g.H, g.W))
    if mode == "gaussian":
        return gaussian_mask(boxes, g, min_overlap)
    if mode != "crucial":
        raise ValueError(f"unknown response distillation mode {mode!r}")
    mask = np.zeros((g.H, g.W))
    if boxes:
        rows, cols = crucial_grid_coords(boxes, g)
        r = np.clip(np.floor(rows + 0.5).astype(int), 0, g.H - 1)
        c = np.clip(np.floor(cols + 0.5).astype(int), 0, g.W - 1)
        mask[r, c] = 1.0
    return mask


def response_distill(
    teacher_resp,
    student_resp: Tensor,
    boxes: Sequence[RotatedBox],
    g: GridSpec,
    mode: str = "gaussian",
    min_overlap: float = DEFAULT_MIN_OVERLAP,
) -> Tensor:
    """Mask-weighted L1 between response maps, divided by ``mask.sum() * channels``."""
    teacher = _teacher(teacher_resp)
    if teacher.shape != student_resp.shape:
        raise T.ShapeError(f"response_distill: shape mismatch {teacher.shape} vs {student_resp.shape}")
    mask = response_mask(boxes, g, mode, min_overlap)
    mass = mask.sum()
    if mass == 0:
        return _zero()
    return T.scale(T.l1_sum(teacher, student_resp, mask), 1.0 / (mass * teacher.shape[0]))


def total_loss(det: Tensor, fea: Tensor, rel: Tensor, resp: Tensor, w: DistillWeights) -> Tensor:
    return det + T.scale(fea, w.lambda1) + T.scale(rel, w.lambda2) + T.scale(resp, w.lambda3)


@dataclass
class Adapters:
    low: AdaptLayer | None = None
    high: AdaptLayer | None = None

    def params(self) -> dict[str, Tensor]:
        out = {}
        for layer in (self.low, self.high):
            if layer is not None:
                out.update(layer.params())
        return out


def make_adapters(cfg: DistillConfig, student: dict[str, int], teacher: dict[str, int] | None = None) -> Adapters:
    """Adaptive layers for the maps each loss reads; ``student``/``teacher`` map
    level name -> channel count."""
    teacher = teacher or student
    low = high = None
    if cfg.adapt_low:
        low = AdaptLayer(student[cfg.fea_level], teacher[cfg.fea_level], name="adapt.low")
    if cfg.adapt_high:
        high = AdaptLayer(student[cfg.rel_level], teacher[cfg.rel_level], name="adapt.high")
    return Adapters(low, high)


def distill_losses(
    teacher: BevFeatures,
    student: BevFeatures,
    boxes: Sequence[RotatedBox],
    g: GridSpec,
    cfg: DistillConfig,
    adapters: Adapters | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """(L_Fea, L_Rel, L_Resp) for a single scene under ``cfg``'s loss modes."""
    adapters = adapters or Adapters()
    w = cfg.weights
    fea = rel = resp = _zero()
    if w.lambda1 > 0:
        fea = feature_distill(
            getattr(teacher, cfg.fea_level), getattr(student, cfg.fea_level), boxes, g,
            adapters.low, cfg.fea_mode, cfg.min_overlap,
        )
    if w.lambda2 > 0:
        rel = relation_distill(
            getattr(teacher, cfg.rel_level), getattr(student, cfg.rel_level), boxes, g,
            adapters.high, cfg.rel_mode, cfg.min_overlap,
        )
    if w.lambda3 > 0:
        resp = response_distill(teacher.resp, student.resp, boxes, g, cfg.resp_mode, cfg.min_overlap)
    return fea, rel, resp
