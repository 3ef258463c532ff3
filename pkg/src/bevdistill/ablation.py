"""Seeded A/B experiments: baselines, teachers, distilled students and the
fixed ablation grids, with an optional on-disk cache of finished runs."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .detector import Detector
from .evaluation import EvalReport
from .losses import PATH_MODALITIES, DistillConfig, DistillWeights
from .synthscene import gen_scenes
from .training import RunConfig, SceneData, TrainResult, distill_student, evaluate_detector, prepare, split, train_detector

log = logging.getLogger(__name__)

STUDIES = ("fea-mode", "fea-level", "rel-mode", "rel-level", "resp-mode", "resp-max", "adapt", "loss-combos")

# Single-loss studies run in the lidar -> camera path, the adaptive-layer study
# in camera -> lidar and the loss grid in fusion -> camera.
DEFAULT_STUDY_PATH = {
    "fea-mode": "l2c",
    "fea-level": "l2c",
    "rel-mode": "l2c",
    "rel-level": "l2c",
    "resp-mode": "l2c",
    "resp-max": "l2c",
    "adapt": "c2l",
    "loss-combos": "f2c",
}

# setting -> which of (fea, rel, resp) is on
LOSS_COMBOS = {
    1: (False, False, False),
    2: (True, False, False),
    3: (False, True, False),
    4: (False, False, True),
    5: (True, True, False),
    6: (False, True, True),
    7: (True, False, True),
    8: (True, True, True),
}

ROW_COLUMNS = ("study", "variant", "path", "seed", "steps", "lambda1", "lambda2", "lambda3", "map", "mate", "maoe")


def masked_weights(w: DistillWeights, on: tuple[bool, bool, bool]) -> DistillWeights:
    return DistillWeights(*(lam if flag else 0.0 for lam, flag in zip((w.lambda1, w.lambda2, w.lambda3), on)))


def study_variants(study: str, path: str | None = None) -> list[tuple[str, DistillConfig | None]]:
    """Named variants of ``study``; ``None`` marks the undistilled baseline."""
    if study not in STUDIES:
        raise ValueError(f"unknown study {study!r}; expected one of {STUDIES}")
    path = path or DEFAULT_STUDY_PATH[study]
    base = DistillConfig.for_path(path)
    only_fea = replace(base, weights=masked_weights(base.weights, LOSS_COMBOS[2]))
    only_rel = replace(base, weights=masked_weights(base.weights, LOSS_COMBOS[3]))
    only_resp = replace(base, weights=masked_weights(base.weights, LOSS_COMBOS[4]))
    if study == "fea-mode":
        return [("baseline", None)] + [(m, replace(only_fea, fea_mode=m)) for m in ("complete", "gaussian", "crucial")]
    if study == "fea-level":
        return [("baseline", None), ("high", replace(only_fea, fea_level="high")), ("low", only_fea)]
    if study == "rel-mode":
        return [("baseline", None)] + [(m, replace(only_rel, rel_mode=m)) for m in ("complete", "gaussian", "crucial")]
    if study == "rel-level":
        return [("baseline", None), ("low", replace(only_rel, rel_level="low")), ("high", only_rel)]
    if study == "resp-mode":
        return [("baseline", None)] + [(m, replace(only_resp, resp_mode=m)) for m in ("complete", "crucial", "gaussian")]
    if study == "resp-max":
        return [("baseline", None), ("without-max", replace(only_resp, resp_use_max=False)), ("with-max", only_resp)]
    if study == "adapt":
        return [
            ("baseline", None),
            ("without-adapt", replace(base, adapt_low=False, adapt_high=False)),
            ("with-adapt", replace(base, adapt_low=True, adapt_high=True)),
        ]
    out = []
    for k, on in LOSS_COMBOS.items():
        out.append((f"setting-{k}", None if not any(on) else replace(base, weights=masked_weights(base.weights, on))))
    return out


@dataclass
class RunSummary:
    map: float
    mate: float
    maoe: float
    class_ap: list[float]
    seconds: float = 0.0  # wall time of the training run that produced it
    det_start: float = float("nan")  # mean L_Det over the first and last WINDOW steps
    det_end: float = float("nan")

    WINDOW = 20

    @classmethod
    def of(cls, rep: EvalReport, res: TrainResult | None = None, seconds: float = 0.0) -> "RunSummary":
        out = cls(rep.mAP, rep.mATE, rep.mAOE, [rep.class_ap(c) for c in rep.class_ids], seconds)
        if res is not None and res.metrics:
            l_det = [row[1] for row in res.metrics]
            out.det_start = float(np.mean(l_det[: cls.WINDOW]))
            out.det_end = float(np.mean(l_det[-cls.WINDOW :]))
        return out


@dataclass
class AblationRow:
    study: str
    variant: str
    path: str
    seed: int
    steps: int
    weights: DistillWeights
    summary: RunSummary

    def values(self) -> tuple:
        w = self.weights
        s = self.summary
        return (self.study, self.variant, self.path, self.seed, self.steps,
                f"{w.lambda1:g}", f"{w.lambda2:g}", f"{w.lambda3:g}", f"{s.map:.6f}", f"{s.mate:.6f}", f"{s.maoe:.6f}")


def rows_to_csv(rows: Sequence[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROW_COLUMNS)
    for r in rows:
        w.writerow(r.values())
    return buf.getvalue()


class Runner:
    """Trains and evaluates detectors on one train/holdout split.

    With ``cache_dir`` every finished run is stored under a hash of everything
    that determines it, so repeated experiments reuse earlier results.
    """

    def __init__(self, cfg: RunConfig, cache_dir=None, train: SceneData | None = None, holdout: SceneData | None = None):
        self.cfg = cfg
        if train is None or holdout is None:
            tr, ho = split(gen_scenes(cfg.scenes, cfg.num_scenes), cfg.holdout)
            train, holdout = prepare(tr, cfg.scenes), prepare(ho, cfg.scenes)
        self.train, self.holdout = train, holdout
        self.cache = Path(cache_dir) if cache_dir is not None else None
        if self.cache is not None:
            self.cache.mkdir(parents=True, exist_ok=True)
        self._mem: dict[str, tuple[Detector, RunSummary]] = {}
        self.trace: list[str] = []  # keys in the order runs were requested

    def cost(self, since: int = 0) -> float:
        """Training seconds behind the distinct runs requested after ``trace[since]``."""
        return sum(self._mem[k][1].seconds for k in dict.fromkeys(self.trace[since:]))

    def _key(self, **parts) -> str:
        base = self.cfg.to_dict()
        for k in ("seed", "steps", "teacher_steps", "distill", "out_dir"):
            base.pop(k, None)
        blob = json.dumps({"cfg": base, "n_train": len(self.train), "n_holdout": len(self.holdout), **parts}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:20]

    def _lookup(self, key: str):
        self.trace.append(key)
        if key in self._mem:
            return self._mem[key]
        if self.cache is not None and (self.cache / f"{key}.json").exists():
            det = Detector.load(self.cache / f"{key}.ckpt")
            s = json.loads((self.cache / f"{key}.json").read_text())
            hit = (det, RunSummary(**s))
            self._mem[key] = hit
            return hit
        return None

    def _store(self, key: str, res: TrainResult, label: str, seconds: float) -> tuple[Detector, RunSummary]:
        summary = RunSummary.of(evaluate_detector(res.detector, self.holdout, self.cfg), res, seconds)
        if self.cache is not None:
            res.detector.save(self.cache / f"{key}.ckpt")
            res.write_metrics(self.cache / f"{key}.metrics.csv")
            (self.cache / f"{key}.json").write_text(json.dumps(summary.__dict__))
        log.info("%s: mAP %.4f", label, summary.map)
        self._mem[key] = (res.detector, summary)
        return self._mem[key]

    def baseline(self, modality: str, seed: int, steps: int | None = None) -> tuple[Detector, RunSummary]:
        steps = self.cfg.steps if steps is None else steps
        key = self._key(kind="plain", modality=modality, seed=seed, steps=steps)
        hit = self._lookup(key)
        if hit is not None:
            return hit
        t0 = time.perf_counter()
        res = train_detector(self.cfg.with_(seed=seed), modality, self.train, steps)
        return self._store(key, res, f"{modality} seed {seed} ({steps} steps)", time.perf_counter() - t0)

    def teacher(self, modality: str, seed: int, steps: int | None = None) -> tuple[Detector, RunSummary]:
        return self.baseline(modality, seed, self.cfg.teacher_steps if steps is None else steps)

    def student(self, dcfg: DistillConfig, seed: int, steps: int | None = None,
                teacher_steps: int | None = None) -> tuple[Detector, RunSummary]:
        """Distilled student of ``dcfg.path`` against the teacher trained with the same seed."""
        steps = self.cfg.steps if steps is None else steps
        if dcfg is None:
            raise ValueError("use baseline() for undistilled runs")
        t_mod, s_mod = PATH_MODALITIES[dcfg.path]
        teacher_steps = self.cfg.teacher_steps if teacher_steps is None else teacher_steps
        # requested even on a cache hit so the teacher shows up in cost()
        teacher, _ = self.teacher(t_mod, seed, teacher_steps)
        key = self._key(kind="distill", distill=dcfg.to_dict(), seed=seed, steps=steps, teacher=[t_mod, teacher_steps])
        hit = self._lookup(key)
        if hit is not None:
            return hit
        t0 = time.perf_counter()
        res = distill_student(self.cfg.with_(seed=seed, distill=dcfg), teacher, self.train, steps)
        return self._store(key, res, f"{dcfg.path} {s_mod} seed {seed} ({steps} steps)", time.perf_counter() - t0)

    def variant(self, path: str, dcfg: DistillConfig | None, seed: int, steps: int | None = None,
                teacher_steps: int | None = None) -> RunSummary:
        if dcfg is None:
            return self.baseline(PATH_MODALITIES[path][1], seed, steps)[1]
        return self.student(dcfg, seed, steps, teacher_steps)[1]


def run_study(runner: Runner, study: str, seeds: Sequence[int], path: str | None = None,
              steps: int | None = None, teacher_steps: int | None = None) -> list[AblationRow]:
    path = path or DEFAULT_STUDY_PATH.get(study)
    variants = study_variants(study, path)
    steps = runner.cfg.steps if steps is None else steps
    rows = []
    for seed in seeds:
        for name, dcfg in variants:
            summary = runner.variant(path, dcfg, seed, steps, teacher_steps)
            weights = dcfg.weights if dcfg is not None else DistillWeights()
            rows.append(AblationRow(study, name, path, seed, steps, weights, summary))
    return rows
