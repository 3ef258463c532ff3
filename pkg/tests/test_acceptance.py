"""Acceptance criteria 1-9, one test each.

Every test records a PASS/FAIL line that is printed in the terminal summary.
Criteria 5-8 are seeded training experiments; finished runs are cached under
``BEVDISTILL_CACHE`` (default ``.cache/acceptance`` in the repository), and the
runtime reported for them is the training time recorded when each run was
first computed. Delete the cache to recompute everything (about 75 minutes on
one core).
"""

import math
import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from bevdistill.ablation import LOSS_COMBOS, Runner, masked_weights
from bevdistill.detector import Detector, decode, save_checkpoint, load_checkpoint
from bevdistill.geometry import GridSpec, RotatedBox, center_cell, corners, crucial_points, gaussian_mask
from bevdistill.gradcheck import run_all
from bevdistill.losses import (
    DistillConfig,
    DistillWeights,
    distill_losses,
    feature_distill,
    relation_distill,
    relation_matrix,
    response_distill,
)
from bevdistill.synthscene import SceneGenParams, gen_scenes, load_scenes, save_scenes
from bevdistill.tensor import Tensor
from bevdistill.training import RunConfig, infer, prepare, train_detector

from oracles import (
    distinct_cell_boxes,
    exact_maps,
    feature_loss_loop,
    random_fixture,
    relation_loss_loop,
    response_loss_loop,
)

# tolerances and budgets, fixed by the criteria
GRAD_TOL = 1e-4
GRAD_STEP = 1e-4
ORACLE_TOL = 1e-10
GEOM_TOL = 1e-12
MODALITY_GAP = 0.10
GAIN = 0.01
MAX_TRAIL = 0.02
COMBO_TOL = 0.01
SEEDS_GAP, SEEDS_GAIN, SEEDS_COMBO, SEEDS_ADAPT = 3, 5, 3, 3
WEAK_TEACHER_STEPS = 200
BUDGET = {1: 120, 2: 60, 3: 60, 4: 60, 5: 30 * 60, 6: 90 * 60, 7: 60 * 60, 8: 45 * 60, 9: 60}

G16 = GridSpec(-8.0, 8.0, -8.0, 8.0, 16, 16)
CACHE = Path(os.environ.get("BEVDISTILL_CACHE", Path(__file__).resolve().parents[1] / ".cache" / "acceptance"))


def _verdict(n, ok, seconds, detail):
    within = seconds <= BUDGET[n]
    return ok and within, f"{detail}; {seconds:.1f}s (budget {BUDGET[n]}s)"


@pytest.fixture(scope="module")
def runner():
    # default run configuration: 512 scenes, last 64 held out, 2000 steps
    return Runner(RunConfig(), cache_dir=CACHE)


# 1 -------------------------------------------------------------------------


def test_criterion_1_gradients(accept):
    t0 = time.perf_counter()
    reports = run_all(seed=0, step=GRAD_STEP, tol=GRAD_TOL, include_ops=False)
    secs = time.perf_counter() - t0
    worst = max(r.max_rel_error for r in reports)
    labels = [r.label for r in reports]
    ok = all(r.passed for r in reports) and worst <= GRAD_TOL and labels == ["L_Fea", "L_Rel", "L_Resp", "L_Det", "L_Total"]
    ok, detail = _verdict(1, ok, secs, f"{', '.join(labels)} max rel err {worst:.2e} (tol {GRAD_TOL:g})")
    accept(1, ok, detail)
    assert ok, "\n".join(r.summary() for r in reports)


# 2 -------------------------------------------------------------------------


def test_criterion_2_self_distillation_zero(accept):
    t0 = time.perf_counter()
    params = SceneGenParams(grid=G16)
    cfg = RunConfig(scenes=params, c_low=4, c_high=6, steps=6, batch=3)
    data = prepare(gen_scenes(params, 12), params)
    nonzero = 0
    for modality in ("lidar", "camera", "fusion"):
        feats = infer(Detector.create(modality, params.num_classes, 4, 6, seed=5), data)
        for path in ("l2c", "c2l", "f2l", "f2c"):
            for i in range(len(data)):
                f = feats.scene(i)
                nonzero += sum(x.item() != 0.0 for x in distill_losses(f, f, data.scenes[i].boxes, params.grid, DistillConfig.for_path(path)))
    identical = True
    for path in ("c2l", "f2c"):
        zero = DistillConfig.for_path(path, weights=DistillWeights(0.0, 0.0, 0.0))
        teacher = infer(Detector.create("fusion" if path == "f2c" else "camera", params.num_classes, 4, 6, seed=9), data)
        student_mod = "lidar" if path == "c2l" else "camera"
        plain = train_detector(cfg, student_mod, data)
        dist = train_detector(cfg, student_mod, data, teacher=teacher, distill=zero)
        identical &= [r[:2] for r in plain.metrics] == [r[:2] for r in dist.metrics]
        identical &= all(plain.detector.params[k].data.tobytes() == dist.detector.params[k].data.tobytes() for k in plain.detector.params)
    secs = time.perf_counter() - t0
    ok, detail = _verdict(2, nonzero == 0 and identical, secs, f"{nonzero} nonzero self-distillation losses, lambda=0 run bit-identical: {identical}")
    accept(2, ok, detail)
    assert ok, detail


# 3 -------------------------------------------------------------------------


def test_criterion_3_oracle_equivalence(accept):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(50):
        t, s, boxes = random_fixture(rng, G16, channels=int(rng.integers(1, 6)), max_boxes=4)
        pairs = [
            (feature_distill(Tensor(t), Tensor(s), boxes, G16).item(), feature_loss_loop(t, s, boxes, G16)),
            (relation_distill(Tensor(t), Tensor(s), boxes, G16).item(), relation_loss_loop(t, s, boxes, G16)),
            (response_distill(Tensor(t), Tensor(s), boxes, G16).item(), response_loss_loop(t, s, boxes, G16)),
        ]
        worst = max(worst, *(abs(a - b) for a, b in pairs))
    secs = time.perf_counter() - t0
    ok, detail = _verdict(3, worst <= ORACLE_TOL, secs, f"50 fixtures, max |loss - oracle| {worst:.2e} (tol {ORACLE_TOL:g})")
    accept(3, ok, detail)
    assert ok, detail


# 4 -------------------------------------------------------------------------


def test_criterion_4_geometry_invariants(accept):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    eq_err = mid_err = 0.0
    for _ in range(500):
        b = RotatedBox(*rng.uniform(-20, 20, 2), *rng.uniform(0.2, 10, 2), rng.uniform(-math.pi, math.pi))
        p = crucial_points(b)
        dx, dy, th = *rng.uniform(-20, 20, 2), rng.uniform(-math.pi, math.pi)
        moved = crucial_points(RotatedBox(b.cx + dx, b.cy + dy, b.length, b.width, b.yaw))
        eq_err = max(eq_err, np.abs(moved - (p + [dx, dy])).max())
        c, s = math.cos(th), math.sin(th)
        turned = crucial_points(RotatedBox(b.cx, b.cy, b.length, b.width, b.yaw + th))
        want = (p - [b.cx, b.cy]) @ np.array([[c, s], [-s, c]]) + [b.cx, b.cy]
        eq_err = max(eq_err, np.abs(turned - want).max())
        k = corners(b)
        mids = (k + np.roll(k, -1, axis=0)) / 2
        mid_err = max(mid_err, np.abs(p[4:8] - mids).max(), np.abs(p[8] - k.mean(axis=0)).max())
    mask_ok = True
    for _ in range(100):
        _, _, boxes = random_fixture(rng, G16, max_boxes=5)
        m = gaussian_mask(boxes, G16)
        mask_ok &= bool(m.min() >= 0.0 and m.max() <= 1.0)
        for b in boxes:
            r, col = center_cell(b, G16)
            if 0 <= r < G16.H and 0 <= col < G16.W:
                mask_ok &= bool(m[r, col] == 1.0)
    rel_ok = True
    for _ in range(100):
        fmap, _, boxes = random_fixture(rng, G16)
        for b in boxes:
            r = relation_matrix(Tensor(fmap), b, G16).data
            rel_ok &= bool(np.array_equal(r, r.T) and np.all(np.diag(r) == 1.0))
    secs = time.perf_counter() - t0
    ok = eq_err <= GEOM_TOL and mid_err <= GEOM_TOL and mask_ok and rel_ok
    ok, detail = _verdict(4, ok, secs, f"equivariance err {eq_err:.1e}, midpoint/center err {mid_err:.1e} (tol {GEOM_TOL:g}), "
                          f"mask in [0,1] with 1 at centers: {mask_ok}, relation symmetric with unit diagonal: {rel_ok}")
    accept(4, ok, detail)
    assert ok, detail


# 5 -------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_5_modality_gap(accept, runner):
    mark = len(runner.trace)
    lidar = [runner.baseline("lidar", s)[1] for s in range(SEEDS_GAP)]
    camera = [runner.baseline("camera", s)[1] for s in range(SEEDS_GAP)]
    gap = np.mean([r.map for r in lidar]) - np.mean([r.map for r in camera])
    halved = all(r.det_end < 0.5 * r.det_start for r in lidar)
    ok, detail = _verdict(5, gap >= MODALITY_GAP and halved, runner.cost(mark),
                          f"lidar mAP {np.mean([r.map for r in lidar]):.4f} vs camera {np.mean([r.map for r in camera]):.4f}, "
                          f"gap {gap:.4f} (need >= {MODALITY_GAP}); lidar L_Det halved in every seed: {halved}")
    accept(5, ok, detail)
    assert ok, detail


# 6 -------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_6_distillation_gain(accept, runner):
    mark = len(runner.trace)
    ok, parts = True, []
    for path, student in (("f2c", "camera"), ("f2l", "lidar")):
        base = np.array([runner.baseline(student, s)[1].map for s in range(SEEDS_GAIN)])
        dist = np.array([runner.student(DistillConfig.for_path(path), s)[1].map for s in range(SEEDS_GAIN)])
        gain, trail = dist.mean() - base.mean(), (base - dist).max()
        ok &= gain >= GAIN and trail <= MAX_TRAIL
        parts.append(f"{path} {base.mean():.4f} -> {dist.mean():.4f} (gain {gain:+.4f}, worst seed {-trail:+.4f})")
    ok, detail = _verdict(6, ok, runner.cost(mark), "; ".join(parts) + f" (need gain >= {GAIN}, no seed below -{MAX_TRAIL})")
    accept(6, ok, detail)
    assert ok, detail


# 7 -------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_7_loss_combinations(accept, runner):
    mark = len(runner.trace)
    base = DistillConfig.for_path("f2c")
    means = {}
    for k in (2, 3, 4, 8):
        dcfg = replace(base, weights=masked_weights(base.weights, LOSS_COMBOS[k]))
        means[k] = float(np.mean([runner.student(dcfg, s)[1].map for s in range(SEEDS_COMBO)]))
    ok = all(means[8] >= means[k] - COMBO_TOL for k in (2, 3, 4))
    ok, detail = _verdict(7, ok, runner.cost(mark), ", ".join(f"setting {k} {v:.4f}" for k, v in means.items())
                          + f" (setting 8 must be >= each of 2-4 minus {COMBO_TOL})")
    accept(7, ok, detail)
    assert ok, detail


# 8 -------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_8_adaptive_layers(accept, runner):
    mark = len(runner.trace)
    with_a = DistillConfig.for_path("c2l", adapt_low=True, adapt_high=True)
    without = replace(with_a, adapt_low=False, adapt_high=False)
    teacher = np.mean([runner.teacher("camera", s, WEAK_TEACHER_STEPS)[1].map for s in range(SEEDS_ADAPT)])
    a = np.mean([runner.student(with_a, s, teacher_steps=WEAK_TEACHER_STEPS)[1].map for s in range(SEEDS_ADAPT)])
    b = np.mean([runner.student(without, s, teacher_steps=WEAK_TEACHER_STEPS)[1].map for s in range(SEEDS_ADAPT)])
    ok, detail = _verdict(8, a >= b, runner.cost(mark),
                          f"camera teacher ({WEAK_TEACHER_STEPS} steps) mAP {teacher:.4f}; lidar student with adapters {a:.4f} vs without {b:.4f}")
    accept(8, ok, detail)
    assert ok, detail


# 9 -------------------------------------------------------------------------


def test_criterion_9_round_trips_and_determinism(accept, tmp_path):
    t0 = time.perf_counter()
    rng = np.random.default_rng(9)
    codec = True
    for _ in range(50):
        boxes = distinct_cell_boxes(rng, int(rng.integers(1, 9)), G16)
        cls, reg = exact_maps(boxes, G16)
        got = sorted(decode(cls, reg, G16, 0.5, 100), key=lambda d: center_cell(d.box, G16))
        want = sorted(boxes, key=lambda b: center_cell(b, G16))
        codec &= len(got) == len(want) and all(
            center_cell(d.box, G16) == center_cell(b, G16) and d.box.class_id == b.class_id
            and abs(d.box.cx - b.cx) <= 1e-6 and abs(d.box.cy - b.cy) <= 1e-6
            and abs(d.box.length - b.length) <= 1e-9 and abs(d.box.width - b.width) <= 1e-9
            and abs(math.remainder(d.box.yaw - b.yaw, 2 * math.pi)) <= 1e-6
            for d, b in zip(got, want)
        )
    params = SceneGenParams(grid=G16)
    scenes = gen_scenes(params, 20)
    save_scenes(tmp_path / "a.bin", scenes)
    save_scenes(tmp_path / "b.bin", load_scenes(tmp_path / "a.bin"))
    scene_files = load_scenes(tmp_path / "a.bin") == scenes and (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    det = Detector.create("fusion", 3, 4, 6, seed=1)
    save_checkpoint(tmp_path / "a.ckpt", det.params)
    save_checkpoint(tmp_path / "b.ckpt", load_checkpoint(tmp_path / "a.ckpt"))
    ckpt = (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    cfg = RunConfig(scenes=params, c_low=4, c_high=6, steps=5, batch=2)
    data = prepare(scenes, params)
    runs = [train_detector(cfg, "lidar", data) for _ in range(2)]
    for i, r in enumerate(runs):
        r.detector.save(tmp_path / f"run{i}.ckpt")
    rerun = (tmp_path / "run0.ckpt").read_bytes() == (tmp_path / "run1.ckpt").read_bytes() and runs[0].metrics == runs[1].metrics
    secs = time.perf_counter() - t0
    ok = codec and scene_files and ckpt and rerun
    ok, detail = _verdict(9, ok, secs, f"encode/decode {codec}, scene file {scene_files}, checkpoint {ckpt}, re-run {rerun}")
    accept(9, ok, detail)
    assert ok, detail
