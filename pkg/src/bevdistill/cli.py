"""``bevdistill`` command line.

Every subcommand reads one JSON RunConfig (``--config``) and lets flags
override individual fields. Outputs go into ``--out``; figures are written
beside the CSV files they illustrate.

Exit codes: 0 success, 1 usage or input error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import plotting
from .ablation import DEFAULT_STUDY_PATH, STUDIES, Runner, rows_to_csv, run_study
from .detector import CheckpointError, Detector
from .gradcheck import run_all
from .losses import PATHS, PATH_MODALITIES, DistillConfig, DistillWeights
from .synthscene import SceneFileError, gen_scenes, load_scenes, save_scenes
from .training import NumericError, RunConfig, SceneData, distill_student, evaluate_detector, prepare, split, train_detector

log = logging.getLogger("bevdistill")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, default=Path("."), help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def _training(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scenes", type=Path, help="scene file; generated from the config when omitted")
    p.add_argument("--split", choices=("train", "holdout", "all"), default="train")
    p.add_argument("--holdout", type=int, help="scenes at the end of the file kept for evaluation")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="bevdistill", description="Cross-modality BEV distillation on synthetic scenes.")
    sub = ap.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-scenes", help="write a scene file")
    _common(p)
    p.add_argument("--count", type=int)

    p = sub.add_parser("train", help="train one detector on the detection loss")
    _common(p)
    _training(p)
    p.add_argument("--modality", choices=("lidar", "camera", "fusion"), required=True)

    p = sub.add_parser("distill", help="train a student against a frozen teacher")
    _common(p)
    _training(p)
    p.add_argument("--teacher", type=Path, required=True)
    p.add_argument("--path", choices=PATHS)
    for k in (1, 2, 3):
        p.add_argument(f"--lambda{k}", type=float)
    p.add_argument("--adapt", choices=("on", "off"), help="override the path's adaptive-layer default")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--scenes", type=Path)
    p.add_argument("--split", choices=("train", "holdout", "all"), default="holdout")
    p.add_argument("--holdout", type=int)

    p = sub.add_parser("grad-check", help="finite-difference check of every op and loss")
    _common(p)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--step", type=float, default=1e-4)
    p.add_argument("--losses-only", action="store_true")

    p = sub.add_parser("ablate", help="run one ablation grid")
    _common(p)
    p.add_argument("--study", required=True, help=", ".join(STUDIES))
    p.add_argument("--path", choices=PATHS)
    p.add_argument("--seeds", type=int, default=3, help="number of seeds, starting at --seed")
    p.add_argument("--steps", type=int)
    p.add_argument("--teacher-steps", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--num-scenes", type=int)
    p.add_argument("--holdout", type=int)
    p.add_argument("--cache", type=Path, help="reuse finished runs from this directory")

    p = sub.add_parser("dump-resp", help="write the channel mean of the response map as PGM")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--scenes", type=Path)
    p.add_argument("--scene-index", type=int, default=0)
    return ap


# ---------------------------------------------------------------------------


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    over = {}
    for name in ("seed", "steps", "batch", "teacher_steps", "num_scenes", "holdout"):
        v = getattr(args, name, None)
        if v is not None:
            over[name] = v
    return cfg.with_(**over)


def _scenes(args, cfg: RunConfig, count: int | None = None):
    if getattr(args, "scenes", None) is not None:
        if not args.scenes.exists():
            raise UsageError(f"scene file not found: {args.scenes}")
        return load_scenes(args.scenes)
    return gen_scenes(cfg.scenes, cfg.num_scenes if count is None else count)


def load_data(args, cfg: RunConfig) -> SceneData:
    scenes = _scenes(args, cfg)
    tr, ho = split(scenes, cfg.holdout)
    chosen = {"train": tr, "holdout": ho, "all": scenes}[args.split]
    if not chosen:
        raise UsageError(f"the {args.split} split is empty")
    return prepare(chosen, cfg.scenes)


def _load_detector(path: Path) -> Detector:
    if not path.exists():
        raise UsageError(f"checkpoint not found: {path}")
    return Detector.load(path)


def _progress(every: int = 100):
    def report(step, row):
        if step % every == 0:
            log.info("step %d  l_det %.4f  total %.4f", step, row[1], row[-1])
    return report


def channel_mean(resp: np.ndarray) -> np.ndarray:
    """``[C,H,W]`` -> ``[H,W]`` mean over channels."""
    return np.asarray(resp, dtype=float).mean(axis=0)


def to_gray(img: np.ndarray) -> np.ndarray:
    """Min-max scale to integers in [0, 255]; a constant map becomes all zeros."""
    lo, hi = float(img.min()), float(img.max())
    if hi - lo <= 0:
        return np.zeros(img.shape, dtype=np.int64)
    return np.rint((img - lo) / (hi - lo) * 255).astype(np.int64)


def pgm_text(gray: np.ndarray) -> str:
    h, w = gray.shape
    lines = ["P2", f"{w} {h}", "255"]
    lines += [" ".join(str(int(v)) for v in row) for row in gray]
    return "\n".join(lines) + "\n"


def grid_csv(img: np.ndarray) -> str:
    return "".join(",".join(repr(float(v)) for v in row) + "\n" for row in img)


# ---------------------------------------------------------------------------


def cmd_gen_scenes(args, cfg: RunConfig) -> int:
    count = cfg.num_scenes if args.count is None else args.count
    if count < 0:
        raise UsageError("--count must be >= 0")
    out = args.out / "scenes.bin"
    save_scenes(out, gen_scenes(cfg.scenes, count))
    print(out)
    return EXIT_OK


def _write_run(args, cfg: RunConfig, res, name: str, title: str) -> None:
    ckpt = args.out / f"{name}.ckpt"
    res.detector.save(ckpt)
    metrics = args.out / f"{name}.metrics.csv"
    res.write_metrics(metrics)
    plotting.plot_losses(res.metrics, args.out / f"{name}.loss.png", title)
    cfg.save(args.out / f"{name}.config.json")
    print(ckpt)


def cmd_train(args, cfg: RunConfig) -> int:
    data = load_data(args, cfg)
    res = train_detector(cfg, args.modality, data, progress=_progress())
    _write_run(args, cfg, res, args.modality, f"{args.modality} (seed {cfg.seed})")
    return EXIT_OK


def cmd_distill(args, cfg: RunConfig) -> int:
    path = args.path or cfg.distill.path
    dcfg = cfg.distill if path == cfg.distill.path else DistillConfig.for_path(path)
    w = dcfg.weights
    lams = [args.lambda1, args.lambda2, args.lambda3]
    if any(v is not None for v in lams):
        w = DistillWeights(*(old if new is None else new for old, new in zip((w.lambda1, w.lambda2, w.lambda3), lams)))
    dcfg = replace(dcfg, weights=w)
    if args.adapt is not None:
        dcfg = replace(dcfg, adapt_low=args.adapt == "on", adapt_high=args.adapt == "on")
    cfg = cfg.with_(distill=dcfg)
    teacher = _load_detector(args.teacher)
    t_mod, s_mod = PATH_MODALITIES[path]
    if teacher.modality != t_mod:
        raise UsageError(f"path {path} needs a {t_mod} teacher, got a {teacher.modality} checkpoint")
    data = load_data(args, cfg)
    # adaptive layers are trained beside the student and never saved with it
    res = distill_student(cfg, teacher, data, progress=_progress())
    _write_run(args, cfg, res, f"{path}-{s_mod}", f"{path} {s_mod} (seed {cfg.seed})")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    det = _load_detector(args.checkpoint)
    data = load_data(args, cfg)
    rep = evaluate_detector(det, data, cfg)
    out = args.out / f"{args.checkpoint.stem}.eval.csv"
    out.write_text(rep.to_csv())
    plotting.plot_class_ap(rep, args.out / f"{args.checkpoint.stem}.eval.png")
    print(f"mAP {rep.mAP:.4f}  mATE {rep.mATE:.4f}  mAOE {rep.mAOE:.4f}")
    return EXIT_OK


def cmd_grad_check(args, cfg: RunConfig) -> int:
    reports = run_all(cfg.seed, args.step, args.tol, include_ops=not args.losses_only)
    lines = [r.summary() for r in reports]
    (args.out / "gradcheck.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    failed = [r.label for r in reports if not r.passed]
    if failed:
        print(f"grad-check failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig) -> int:
    if args.study not in STUDIES:
        raise UsageError(f"unknown study {args.study!r}; expected one of {', '.join(STUDIES)}")
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    runner = Runner(cfg, cache_dir=args.cache)
    seeds = range(cfg.seed, cfg.seed + args.seeds)
    rows = run_study(runner, args.study, seeds, args.path, cfg.steps, cfg.teacher_steps)
    out = args.out / f"ablate-{args.study}.csv"
    out.write_text(rows_to_csv(rows))
    path = args.path or DEFAULT_STUDY_PATH[args.study]
    plotting.plot_ablation(rows, args.out / f"ablate-{args.study}.png", f"{args.study} ({path})")
    sys.stdout.write(out.read_text())
    return EXIT_OK


def cmd_dump_resp(args, cfg: RunConfig) -> int:
    det = _load_detector(args.checkpoint)
    scenes = _scenes(args, cfg, count=args.scene_index + 1) if args.scenes is None else _scenes(args, cfg)
    if not 0 <= args.scene_index < len(scenes):
        raise UsageError(f"--scene-index {args.scene_index} out of range for {len(scenes)} scenes")
    data = prepare([scenes[args.scene_index]], cfg.scenes)
    resp = det.forward(data.inputs(0)).resp.data
    img = channel_mean(resp)
    stem = args.out / f"resp-{args.scene_index}"
    Path(f"{stem}.pgm").write_text(pgm_text(to_gray(img)))
    Path(f"{stem}.csv").write_text(grid_csv(img))
    plotting.plot_heatmap(img, f"{stem}.png", f"response mean, scene {args.scene_index}")
    print(f"{stem}.pgm")
    return EXIT_OK


COMMANDS = {
    "gen-scenes": cmd_gen_scenes,
    "train": cmd_train,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "grad-check": cmd_grad_check,
    "ablate": cmd_ablate,
    "dump-resp": cmd_dump_resp,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:  # --help or a usage error already reported by argparse
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args)
        args.out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.cmd](args, cfg)
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, CheckpointError, SceneFileError, FileNotFoundError, ValueError, TypeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
