"""Center-distance matched AP, mAP and true-positive error summaries."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .detector import Detection
from .geometry import RotatedBox, wrap_angle

DEFAULT_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
TP_METRIC_THRESHOLD = 2.0
RECALL_POINTS = 101


@dataclass
class Matching:
    """Per-detection outcome for one scene and one class at one threshold."""

    scores: np.ndarray
    tp: np.ndarray  # bool per detection
    gt_index: np.ndarray  # matched gt index or -1
    num_gt: int
    trans_err: np.ndarray  # per TP
    orient_err: np.ndarray  # per TP

    @property
    def n_tp(self) -> int:
        return int(self.tp.sum())

    @property
    def n_fp(self) -> int:
        return int((~self.tp).sum())

    @property
    def n_fn(self) -> int:
        return self.num_gt - self.n_tp


def match(dets: Sequence[Detection], gts: Sequence[RotatedBox], dist_thresh: float) -> Matching:
    """Greedy matching in the given (descending-score) order.

    Each detection takes the nearest unmatched ground truth of its class
    within ``dist_thresh``; distance ties go to the lower gt index.
    """
    gt_xy = np.array([[g.cx, g.cy] for g in gts]).reshape(-1, 2)
    gt_cls = np.array([g.class_id for g in gts], dtype=int)
    taken = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(dets), dtype=bool)
    assigned = np.full(len(dets), -1)
    terr, oerr = [], []
    for i, d in enumerate(dets):
        if not len(gts):
            break
        dist = np.hypot(gt_xy[:, 0] - d.box.cx, gt_xy[:, 1] - d.box.cy)
        ok = (~taken) & (gt_cls == d.box.class_id) & (dist <= dist_thresh)
        if not ok.any():
            continue
        j = int(np.argmin(np.where(ok, dist, np.inf)))
        taken[j] = True
        tp[i] = True
        assigned[i] = j
        terr.append(dist[j])
        oerr.append(abs(wrap_angle(d.box.yaw - gts[j].yaw)))
    return Matching(
        np.array([d.score for d in dets], dtype=np.float64),
        tp,
        assigned,
        len(gts),
        np.array(terr),
        np.array(oerr),
    )


def average_precision(scores: np.ndarray, tp: np.ndarray, num_gt: int) -> float:
    """101-point interpolated AP from pooled detections.

    Detections with equal scores are treated as one operating point, so the
    result does not depend on their relative order.
    """
    scores = np.asarray(scores, dtype=np.float64)
    tp = np.asarray(tp, dtype=bool)
    if num_gt == 0 or tp.sum() == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    s, t = scores[order], tp[order]
    ctp = np.cumsum(t)
    cfp = np.cumsum(~t)
    last = np.r_[s[1:] != s[:-1], True]
    recall = ctp[last] / num_gt
    precision = ctp[last] / (ctp[last] + cfp[last])
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    grid = np.linspace(0.0, 1.0, RECALL_POINTS)
    idx = np.searchsorted(recall, grid, side="left")
    sampled = np.where(idx < len(recall), envelope[np.minimum(idx, len(recall) - 1)], 0.0)
    return float(sampled.mean())


@dataclass
class EvalReport:
    thresholds: tuple[float, ...]
    class_ids: tuple[int, ...]
    ap: dict[tuple[int, float], float]  # (class, threshold) -> AP, nan if no gt
    counts: dict[tuple[int, float], tuple[int, int, int]]  # (class, threshold) -> TP, FP, FN
    ate: dict[int, float]
    aoe: dict[int, float]
    empty: bool = False
    extra: dict = field(default_factory=dict)

    @property
    def mAP(self) -> float:
        vals = [v for v in self.ap.values() if not math.isnan(v)]
        return float(np.mean(vals)) if vals else 0.0

    @property
    def mATE(self) -> float:
        vals = [v for v in self.ate.values() if not math.isnan(v)]
        return float(np.mean(vals)) if vals else 0.0

    @property
    def mAOE(self) -> float:
        vals = [v for v in self.aoe.values() if not math.isnan(v)]
        return float(np.mean(vals)) if vals else 0.0

    def class_ap(self, class_id: int) -> float:
        vals = [self.ap[(class_id, t)] for t in self.thresholds]
        vals = [v for v in vals if not math.isnan(v)]
        return float(np.mean(vals)) if vals else float("nan")

    CSV_COLUMNS = ("kind", "class", "threshold", "ap", "tp", "fp", "fn", "ate", "aoe")

    def to_csv(self) -> str:
        """Rows ``(kind, class, threshold, ap, tp, fp, fn, ate, aoe)``: one ``ap``
        row per (class, threshold), one ``class`` row per class, then ``summary``."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_COLUMNS)
        for c in self.class_ids:
            for t in self.thresholds:
                tp, fp, fn = self.counts[(c, t)]
                w.writerow(("ap", c, f"{t:g}", _fmt(self.ap[(c, t)]), tp, fp, fn, "", ""))
        for c in self.class_ids:
            w.writerow(("class", c, "", _fmt(self.class_ap(c)), "", "", "", _fmt(self.ate[c]), _fmt(self.aoe[c])))
        tp = sum(v[0] for v in self.counts.values())
        fp = sum(v[1] for v in self.counts.values())
        fn = sum(v[2] for v in self.counts.values())
        w.writerow(("summary", "all", "all", _fmt(self.mAP), tp, fp, fn, _fmt(self.mATE), _fmt(self.mAOE)))
        w.writerow(("empty", "", "", int(self.empty), "", "", "", "", ""))
        return buf.getvalue()


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.6f}"


def _rank_key(d: Detection):
    # equal scores fall back to geometry so the matching ignores input order
    b = d.box
    return (-d.score, b.cx, b.cy, b.yaw, b.length, b.width)


def _tp_errors(ms: Sequence[Matching]) -> tuple[float, float]:
    terr = np.concatenate([m.trans_err for m in ms]) if ms else np.zeros(0)
    oerr = np.concatenate([m.orient_err for m in ms]) if ms else np.zeros(0)
    if not terr.size:
        return float("nan"), float("nan")
    return float(terr.mean()), float(oerr.mean())


def evaluate(
    dets_per_scene: Sequence[Sequence[Detection]],
    gts_per_scene: Sequence[Sequence[RotatedBox]],
    num_classes: int,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    scene_ids: tuple[Sequence[int], Sequence[int]] | None = None,
) -> EvalReport:
    """Evaluate aligned per-scene detections against ground truth.

    ``scene_ids`` optionally gives (detection ids, gt ids) to verify alignment.
    """
    if scene_ids is not None and list(scene_ids[0]) != list(scene_ids[1]):
        raise ValueError("detections and ground truth refer to different scene ids")
    if len(dets_per_scene) != len(gts_per_scene):
        raise ValueError(f"{len(dets_per_scene)} detection lists for {len(gts_per_scene)} scenes")
    thresholds = tuple(float(t) for t in thresholds)
    classes = tuple(range(num_classes))
    ap, counts, ate, aoe = {}, {}, {}, {}
    empty = not any(len(g) for g in gts_per_scene) and not any(len(d) for d in dets_per_scene)
    for c in classes:
        per_scene = [
            (sorted((d for d in dets if d.box.class_id == c), key=_rank_key), [g for g in gts if g.class_id == c])
            for dets, gts in zip(dets_per_scene, gts_per_scene)
        ]
        num_gt = sum(len(g) for _, g in per_scene)
        for t in thresholds:
            ms = [match(d, g, t) for d, g in per_scene]
            scores = np.concatenate([m.scores for m in ms]) if ms else np.zeros(0)
            tps = np.concatenate([m.tp for m in ms]) if ms else np.zeros(0, dtype=bool)
            ap[(c, t)] = average_precision(scores, tps, num_gt) if num_gt else float("nan")
            n_tp = int(tps.sum())
            counts[(c, t)] = (n_tp, int(len(tps) - n_tp), num_gt - n_tp)
        ate[c], aoe[c] = _tp_errors([match(d, g, TP_METRIC_THRESHOLD) for d, g in per_scene])
    return EvalReport(thresholds, classes, ap, counts, ate, aoe, empty)
