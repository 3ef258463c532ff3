"""Run configuration, Adam updates and the train / distill / evaluate loops."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .detector import Detector, Targets, build_targets, decode, detection_loss_batch, lidar_scatter
from .evaluation import DEFAULT_THRESHOLDS, EvalReport, evaluate
from .losses import BevFeatures, DistillConfig, PATH_MODALITIES, distill_losses, make_adapters, total_loss
from .synthscene import Scene, SceneGenParams
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "l_det", "l_fea", "l_rel", "l_resp", "total")


class NumericError(RuntimeError):
    def __init__(self, step: int, what: str = "loss"):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step


@dataclass(frozen=True)
class RunConfig:
    scenes: SceneGenParams = field(default_factory=SceneGenParams)
    num_scenes: int = 512
    c_low: int = 16
    c_high: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 2000
    batch: int = 4
    teacher_steps: int = 3000
    holdout: int = 64
    seed: int = 0
    score_thresh: float = 0.05
    max_dets: int = 50
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    distill: DistillConfig = field(default_factory=lambda: DistillConfig.for_path("f2c"))
    out_dir: str = "runs"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scenes"] = self.scenes.to_dict()
        d["distill"] = self.distill.to_dict()
        d["thresholds"] = list(self.thresholds)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        if "scenes" in d:
            d["scenes"] = SceneGenParams.from_dict(d["scenes"])
        if "distill" in d:
            d["distill"] = DistillConfig.from_dict(d["distill"])
        if "thresholds" in d:
            d["thresholds"] = tuple(float(t) for t in d["thresholds"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    def with_(self, **changes) -> "RunConfig":
        return replace(self, **changes)


class Adam:
    """Adam without weight decay over a name -> Tensor mapping."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            p.data -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.grad = None


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass
class SceneData:
    """Network inputs and detection targets for a list of scenes."""

    scenes: list[Scene]
    lidar: np.ndarray  # [S, 4, H, W]
    camera: np.ndarray  # [S, 1, H, W]
    targets: list[Targets]

    def __len__(self) -> int:
        return len(self.scenes)

    def inputs(self, idx) -> dict[str, np.ndarray]:
        return {"lidar": self.lidar[idx], "camera": self.camera[idx]}

    @property
    def boxes(self):
        return [s.boxes for s in self.scenes]


def prepare(scenes: Sequence[Scene], params: SceneGenParams, min_overlap: float = 0.1) -> SceneData:
    g = params.grid
    lidar = np.stack([lidar_scatter(s.lidar_points, g) for s in scenes]) if scenes else np.zeros((0, 4, g.H, g.W))
    camera = np.stack([s.camera_obs[None] for s in scenes]) if scenes else np.zeros((0, 1, g.H, g.W))
    targets = [build_targets(s.boxes, g, params.num_classes, min_overlap) for s in scenes]
    return SceneData(list(scenes), lidar, camera, targets)


def split(scenes: Sequence[Scene], holdout: int) -> tuple[list[Scene], list[Scene]]:
    """Last ``holdout`` scenes are held out for evaluation."""
    holdout = min(holdout, len(scenes))
    cut = len(scenes) - holdout
    return list(scenes[:cut]), list(scenes[cut:])


def _stream(seed: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), purpose]))


def init_seed(seed: int) -> int:
    return int(_stream(seed, 1).integers(2**31))


def new_detector(cfg: RunConfig, modality: str) -> Detector:
    return Detector.create(modality, cfg.scenes.num_classes, cfg.c_low, cfg.c_high, seed=init_seed(cfg.seed))


def infer(det: Detector, data: SceneData, use_max: bool = True, chunk: int = 16) -> BevFeatures:
    """Batched forward pass with no tape; returns plain-valued features."""
    parts = []
    for start in range(0, len(data), chunk):
        idx = np.arange(start, min(start + chunk, len(data)))
        parts.append(det.forward(data.inputs(idx), use_max=use_max))
    return BevFeatures(*(Tensor._wrap(np.concatenate([getattr(p, f).data for p in parts]), False)
                         for f in ("low", "high", "cls", "reg", "resp")))


# ---------------------------------------------------------------------------
# loops
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    detector: Detector
    metrics: list[tuple]

    def write_metrics(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(METRIC_COLUMNS)
            for row in self.metrics:
                w.writerow([row[0], *(repr(float(v)) for v in row[1:])])


def _check(value: float, step: int) -> None:
    if not math.isfinite(value):
        raise NumericError(step)


def train_detector(
    cfg: RunConfig,
    modality: str,
    data: SceneData,
    steps: int | None = None,
    teacher: BevFeatures | None = None,
    distill: DistillConfig | None = None,
    progress: Callable[[int, tuple], None] | None = None,
) -> TrainResult:
    """Train a fresh detector of ``modality`` on ``data``.

    With ``teacher`` (precomputed frozen features for every scene in ``data``)
    and ``distill``, the objective is the weighted sum of the detection loss and
    the three distillation losses; otherwise it is the detection loss alone.
    Adaptive layers live beside the detector and are discarded afterwards.
    """
    steps = cfg.steps if steps is None else steps
    det = new_detector(cfg, modality)
    g = cfg.scenes.grid
    use_max = distill.resp_use_max if distill else True
    adapters = None
    trainable = dict(det.params)
    if distill is not None:
        student_ch = {"low": det.c_low, "high": det.c_high}
        teacher_ch = {"low": teacher.low.shape[1], "high": teacher.high.shape[1]} if teacher is not None else None
        adapters = make_adapters(distill, student_ch, teacher_ch)
        trainable.update(adapters.params())
    opt = Adam(trainable, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    batch_rng = _stream(cfg.seed, 2)
    n = len(data)
    bsz = min(cfg.batch, n)
    metrics = []
    for step in range(steps):
        idx = np.sort(batch_rng.choice(n, size=bsz, replace=False))
        with Tape() as tape:
            f = det.forward(data.inputs(idx), use_max=use_max)
            l_det = detection_loss_batch(f.cls, f.reg, [data.targets[i] for i in idx])
            fea = rel = resp = Tensor(0.0)
            if distill is not None and teacher is not None:
                for k, i in enumerate(idx):
                    tf = BevFeatures(*(Tensor._wrap(getattr(teacher, a).data[i], False) for a in ("low", "high", "cls", "reg", "resp")))
                    a, b, c = distill_losses(tf, f.scene(k), data.scenes[i].boxes, g, distill, adapters)
                    fea, rel, resp = fea + a, rel + b, resp + c
                fea, rel, resp = (T.scale(x, 1.0 / bsz) for x in (fea, rel, resp))
                total = total_loss(l_det, fea, rel, resp, distill.weights)
            else:
                total = l_det
        row = (step, l_det.item(), fea.item(), rel.item(), resp.item(), total.item())
        _check(row[-1], step)
        tape.backward(total)
        opt.step()
        metrics.append(row)
        if progress is not None:
            progress(step, row)
    return TrainResult(det, metrics)


def distill_student(
    cfg: RunConfig,
    teacher: Detector,
    data: SceneData,
    steps: int | None = None,
    progress=None,
) -> TrainResult:
    """Train the student of ``cfg.distill.path`` against a frozen ``teacher``."""
    dcfg = cfg.distill
    t_mod, s_mod = PATH_MODALITIES[dcfg.path]
    if teacher.modality != t_mod:
        raise ValueError(f"path {dcfg.path} needs a {t_mod} teacher, got {teacher.modality}")
    feats = infer(teacher, data, use_max=dcfg.resp_use_max)
    return train_detector(cfg, s_mod, data, steps, teacher=feats, distill=dcfg, progress=progress)


def predict(det: Detector, data: SceneData, cfg: RunConfig):
    feats = infer(det, data)
    g = cfg.scenes.grid
    return [decode(feats.cls.data[i], feats.reg.data[i], g, cfg.score_thresh, cfg.max_dets) for i in range(len(data))]


def evaluate_detector(det: Detector, data: SceneData, cfg: RunConfig) -> EvalReport:
    dets = predict(det, data, cfg)
    return evaluate(dets, data.boxes, cfg.scenes.num_classes, cfg.thresholds)
