"""Finite-difference checks of every primitive op and every training loss.

The loss fixture is a single 16x16 scene with narrow layers: a lidar student
with both adaptive layers switched on, distilled from random teacher maps, so
one pass covers the encoder, BEV encoder, head and adapter parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .detector import Detector, build_targets, detection_loss_batch, lidar_scatter
from .geometry import GridSpec, RotatedBox
from .losses import BevFeatures, DistillConfig, feature_distill, make_adapters, relation_distill, response_distill, total_loss
from .tensor import GradCheckReport, Tensor

FIXTURE_GRID = GridSpec(-8.0, 8.0, -8.0, 8.0, 16, 16)


@dataclass
class Check:
    label: str
    fn: Callable[[], Tensor]
    leaves: dict[str, Tensor]


def _leaf(rng, shape, name, lo=None, hi=None):
    data = rng.normal(size=shape) if lo is None else rng.uniform(lo, hi, size=shape)
    return Tensor(data, requires_grad=True, name=name)


def op_checks(seed: int = 0) -> list[Check]:
    """One small check per primitive; each label is the op's name."""
    rng = np.random.default_rng(seed)
    a = _leaf(rng, (2, 5, 5), "a")
    b = _leaf(rng, (2, 5, 5), "b")
    pos = _leaf(rng, (2, 5, 5), "pos", 0.2, 2.0)
    k = _leaf(rng, (3, 2, 3, 3), "kernel")
    bias = _leaf(rng, (3,), "bias")
    w = rng.normal(size=(2, 5, 5))
    feats = _leaf(rng, (2, 9, 4), "feats")
    rows, cols = rng.uniform(-0.5, 4.5, 7), rng.uniform(-0.5, 4.5, 7)
    pair_w = rng.normal(size=(2, 9, 9))
    conv_w = rng.normal(size=(3, 5, 5))
    gather_w = rng.normal(size=(7, 2))
    return [
        Check("add", lambda: T.weighted_sum(T.add(a, b), w), {"a": a, "b": b}),
        Check("sub", lambda: T.weighted_sum(T.sub(a, b), w), {"a": a, "b": b}),
        Check("mul", lambda: T.weighted_sum(T.mul(a, b), w), {"a": a, "b": b}),
        Check("scale", lambda: T.weighted_sum(T.scale(a, -1.7), w), {"a": a}),
        Check("relu", lambda: T.weighted_sum(T.relu(a), w), {"a": a}),
        Check("sigmoid", lambda: T.weighted_sum(T.sigmoid(a), w), {"a": a}),
        Check("log", lambda: T.weighted_sum(T.log(pos), w), {"pos": pos}),
        Check("exp", lambda: T.weighted_sum(T.exp(a), w), {"a": a}),
        Check("power", lambda: T.weighted_sum(T.power(pos, 2.0), w), {"pos": pos}),
        Check("clip", lambda: T.weighted_sum(T.clip(a, -0.5, 0.5), w), {"a": a}),
        Check("conv2d", lambda: T.weighted_sum(T.conv2d(a, k, bias), conv_w), {"input": a, "kernel": k, "bias": bias}),
        Check("max_over_channel", lambda: T.weighted_sum(T.max_over_channel(a), w[0]), {"a": a}),
        Check("concat", lambda: T.weighted_sum(T.concat([a, b]), np.concatenate([w, w])), {"a": a, "b": b}),
        Check("gather_bilinear", lambda: T.weighted_sum(T.gather_bilinear(a, rows, cols), gather_w), {"map": a}),
        Check("cosine_matrix", lambda: T.weighted_sum(T.cosine_matrix(feats), pair_w), {"feats": feats}),
        Check("l1_sum", lambda: T.l1_sum(a, b, w[0] ** 2), {"a": a, "b": b}),
    ]


def linear_check(seed: int = 0) -> Check:
    """A purely linear expression: central differences are exact up to rounding."""
    rng = np.random.default_rng(seed)
    x = _leaf(rng, (2, 6, 6), "x")
    k = Tensor(rng.normal(size=(3, 2, 3, 3)))
    bias = Tensor(rng.normal(size=3))
    w = rng.normal(size=(3, 6, 6))
    return Check("linear", lambda: T.weighted_sum(T.scale(T.conv2d(x, k, bias), 0.5), w), {"x": x})


def _fixture_scene(rng: np.random.Generator, g: GridSpec):
    boxes = [
        RotatedBox(1.3, -2.1, 4.2, 1.9, 0.4, 0),
        RotatedBox(-4.6, 3.7, 1.0, 0.8, -1.2, 2),
        RotatedBox(5.2, 5.0, 7.0, 2.5, 2.3, 1),
    ]
    pts = []
    for b in boxes:
        n = 30
        local = rng.uniform(-0.5, 0.5, size=(n, 2)) * [b.length, b.width]
        c, s = np.cos(b.yaw), np.sin(b.yaw)
        xy = local @ np.array([[c, s], [-s, c]]) + [b.cx, b.cy]
        pts.append(np.column_stack([xy, rng.uniform(0, 1, n)]))
    return boxes, lidar_scatter(np.concatenate(pts), g)


def loss_checks(seed: int = 0, c_low: int = 3, c_high: int = 4) -> list[Check]:
    """L_Fea, L_Rel, L_Resp, L_Det and L_Total, each against every student and
    adapter parameter."""
    g = FIXTURE_GRID
    rng = np.random.default_rng(seed)
    boxes, scatter = _fixture_scene(rng, g)
    num_classes = 3
    student = Detector.create("lidar", num_classes, c_low, c_high, seed=seed + 1)
    cfg = DistillConfig.for_path("c2l")
    adapters = make_adapters(cfg, {"low": c_low, "high": c_high}, {"low": c_low + 1, "high": c_high + 1})
    teacher = BevFeatures(
        Tensor(rng.normal(size=(c_low + 1, g.H, g.W))),
        Tensor(rng.normal(size=(c_high + 1, g.H, g.W))),
        Tensor(rng.uniform(size=(num_classes, g.H, g.W))),
        Tensor(rng.normal(size=(6, g.H, g.W))),
        Tensor(rng.normal(size=(7, g.H, g.W))),
    )
    # Zero biases put many ReLU inputs exactly on the hinge in empty regions,
    # and identity adapters are a special point too; nudge everything to a
    # generic point before differencing.
    for p in [*student.params.values(), *adapters.params().values()]:
        p.data += 0.1 * rng.normal(size=p.shape)
    targets = [build_targets(boxes, g, num_classes, cfg.min_overlap)]
    leaves = {**student.params, **adapters.params()}

    def forward() -> BevFeatures:
        return student.forward({"lidar": scatter})

    def fea():
        return feature_distill(teacher.low, forward().low, boxes, g, adapters.low)

    def rel():
        return relation_distill(teacher.high, forward().high, boxes, g, adapters.high)

    def resp():
        return response_distill(teacher.resp, forward().resp, boxes, g)

    def det():
        f = forward()
        return detection_loss_batch(T.reshape(f.cls, (1,) + f.cls.shape), T.reshape(f.reg, (1,) + f.reg.shape), targets)

    def total():
        f = forward()
        l_det = detection_loss_batch(T.reshape(f.cls, (1,) + f.cls.shape), T.reshape(f.reg, (1,) + f.reg.shape), targets)
        return total_loss(
            l_det,
            feature_distill(teacher.low, f.low, boxes, g, adapters.low),
            relation_distill(teacher.high, f.high, boxes, g, adapters.high),
            response_distill(teacher.resp, f.resp, boxes, g),
            cfg.weights,
        )

    return [
        Check("L_Fea", fea, leaves),
        Check("L_Rel", rel, leaves),
        Check("L_Resp", resp, leaves),
        Check("L_Det", det, leaves),
        Check("L_Total", total, leaves),
    ]


def run_checks(checks: list[Check], step: float = 1e-4, tol: float = 1e-4) -> list[GradCheckReport]:
    return [T.grad_check(c.fn, c.leaves, step=step, tol=tol, label=c.label) for c in checks]


def run_all(seed: int = 0, step: float = 1e-4, tol: float = 1e-4, include_ops: bool = True) -> list[GradCheckReport]:
    checks = (op_checks(seed) if include_ops else []) + loss_checks(seed)
    return run_checks(checks, step, tol)
