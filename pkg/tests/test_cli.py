import csv
import io
import math

import numpy as np
import pytest

from bevdistill import cli
from bevdistill import tensor as T
from bevdistill.ablation import LOSS_COMBOS, STUDIES, study_variants
from bevdistill.detector import Detector
from bevdistill.geometry import GridSpec
from bevdistill.gradcheck import linear_check, run_checks
from bevdistill.synthscene import SceneGenParams, load_scenes
from bevdistill.training import RunConfig, new_detector, prepare

G = GridSpec(-8.0, 8.0, -8.0, 8.0, 16, 16)
TINY = RunConfig(scenes=SceneGenParams(grid=G), num_scenes=16, holdout=4, c_low=4, c_high=6, steps=3, batch=2, teacher_steps=3)


@pytest.fixture
def env(tmp_path):
    cfg = tmp_path / "cfg.json"
    TINY.save(cfg)
    assert cli.main(["gen-scenes", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    return tmp_path, ["--config", str(cfg), "--scenes", str(tmp_path / "scenes.bin")]


def run(*argv):
    return cli.main([str(a) for a in argv])


def params_bytes(path):
    det = Detector.load(path)
    return {k: v.data.tobytes() for k, v in det.params.items()}


def test_gen_scenes_empty_and_repeatable(tmp_path, env):
    out, _ = env
    cfg = out / "cfg.json"
    assert run("gen-scenes", "--config", cfg, "--count", 0, "--out", tmp_path / "e") == 0
    assert load_scenes(tmp_path / "e" / "scenes.bin") == []
    assert run("gen-scenes", "--config", cfg, "--out", tmp_path / "again") == 0
    assert (tmp_path / "again" / "scenes.bin").read_bytes() == (out / "scenes.bin").read_bytes()
    assert len(load_scenes(out / "scenes.bin")) == 16


def test_train_zero_steps_is_initialization(env):
    out, common = env
    assert run("train", *common, "--modality", "lidar", "--steps", 0, "--seed", 4, "--out", out) == 0
    init = new_detector(TINY.with_(seed=4), "lidar")
    assert params_bytes(out / "lidar.ckpt") == {k: v.data.tobytes() for k, v in init.params.items()}


def test_train_is_deterministic_and_logs_metrics(env):
    out, common = env
    assert run("train", *common, "--modality", "camera", "--out", out / "a") == 0
    assert run("train", *common, "--modality", "camera", "--out", out / "b") == 0
    assert (out / "a" / "camera.ckpt").read_bytes() == (out / "b" / "camera.ckpt").read_bytes()
    assert (out / "a" / "camera.metrics.csv").read_bytes() == (out / "b" / "camera.metrics.csv").read_bytes()
    rows = list(csv.reader(io.StringIO((out / "a" / "camera.metrics.csv").read_text())))
    assert rows[0] == ["step", "l_det", "l_fea", "l_rel", "l_resp", "total"] and len(rows) == 4
    assert (out / "a" / "camera.loss.png").stat().st_size > 0


def test_distill_with_zero_weights_matches_plain_training(env):
    out, common = env
    assert run("train", *common, "--modality", "camera", "--out", out) == 0
    assert run("train", *common, "--modality", "lidar", "--out", out) == 0
    assert run("distill", *common, "--teacher", out / "camera.ckpt", "--path", "c2l",
               "--lambda1", 0, "--lambda2", 0, "--lambda3", 0, "--out", out) == 0
    assert (out / "c2l-lidar.ckpt").read_bytes() == (out / "lidar.ckpt").read_bytes()


def test_distill_strips_adapters_and_logs_nonnegative_losses(env):
    out, common = env
    assert run("train", *common, "--modality", "camera", "--out", out) == 0
    assert run("distill", *common, "--teacher", out / "camera.ckpt", "--path", "c2l", "--out", out) == 0
    assert not any(k.startswith("adapt") for k in Detector.load(out / "c2l-lidar.ckpt").params)
    rows = list(csv.DictReader(io.StringIO((out / "c2l-lidar.metrics.csv").read_text())))
    assert all(float(r[k]) >= 0 for r in rows for k in ("l_fea", "l_rel", "l_resp"))
    assert any(float(r["l_fea"]) > 0 for r in rows)


def test_distill_usage_errors(env):
    out, common = env
    assert run("train", *common, "--modality", "camera", "--steps", 0, "--out", out) == 0
    assert run("distill", *common, "--teacher", out / "camera.ckpt", "--path", "f2c", "--out", out) == 1
    assert run("distill", *common, "--teacher", out / "missing.ckpt", "--path", "c2l", "--out", out) == 1
    assert run("distill", *common, "--path", "c2l", "--out", out) == 1
    assert run("train", "--modality", "radar") == 1
    assert run("ablate", "--study", "nope", "--out", out) == 1


def test_nan_loss_exits_with_numeric_failure(env, monkeypatch):
    out, common = env
    monkeypatch.setattr("bevdistill.training.detection_loss_batch", lambda cls, reg, t: T.scale(T.sum(cls), math.nan))
    assert run("train", *common, "--modality", "lidar", "--out", out) == 2


def test_eval_is_repeatable_and_untrained_is_poor(env):
    out, common = env
    assert run("train", *common, "--modality", "lidar", "--steps", 0, "--out", out) == 0
    assert run("eval", *common, "--checkpoint", out / "lidar.ckpt", "--out", out / "a") == 0
    assert run("eval", *common, "--checkpoint", out / "lidar.ckpt", "--out", out / "b") == 0
    a = (out / "a" / "lidar.eval.csv").read_text()
    assert a == (out / "b" / "lidar.eval.csv").read_text()
    summary = next(r for r in csv.reader(io.StringIO(a)) if r[0] == "summary")
    assert float(summary[3]) < 0.1
    assert (out / "a" / "lidar.eval.png").exists()


# grad-check ----------------------------------------------------------------


def test_linear_fixture_is_exact():
    rep = run_checks([linear_check(0)])[0]
    assert rep.max_rel_error <= 1e-10


def test_grad_check_command_passes(tmp_path, capsys):
    assert run("grad-check", "--out", tmp_path) == 0
    text = (tmp_path / "gradcheck.txt").read_text()
    for label in ("conv2d", "gather_bilinear", "L_Fea", "L_Rel", "L_Resp", "L_Det", "L_Total"):
        assert f"PASS {label}:" in text


def test_grad_check_names_corrupted_op(tmp_path, monkeypatch, capsys):
    def bad_log(a):
        # correct value, adjoint off by a factor of two
        return T._emit(np.log(a.data), (a,), lambda g: (2.0 * g / a.data,))

    monkeypatch.setattr(T, "log", bad_log)
    assert run("grad-check", "--out", tmp_path) == 2
    err = capsys.readouterr().err
    assert "grad-check failed: log" in err
    assert "FAIL log:" in (tmp_path / "gradcheck.txt").read_text()


# ablate --------------------------------------------------------------------


def test_study_grids():
    combos = study_variants("loss-combos")
    assert [n for n, _ in combos] == [f"setting-{k}" for k in range(1, 9)]
    for (_, d), on in zip(combos, LOSS_COMBOS.values()):
        lams = (0.0, 0.0, 0.0) if d is None else (d.weights.lambda1, d.weights.lambda2, d.weights.lambda3)
        assert [lam > 0 for lam in lams] == list(on)
    adapt = study_variants("adapt")
    assert [n for n, _ in adapt] == ["baseline", "without-adapt", "with-adapt"]
    assert adapt[2][1].path == "c2l" and adapt[2][1].adapt_low and not adapt[1][1].adapt_high
    for study in ("fea-mode", "rel-mode", "resp-mode"):
        assert {n for n, _ in study_variants(study)} == {"baseline", "complete", "gaussian", "crucial"}
    with pytest.raises(ValueError):
        study_variants("nope")


@pytest.mark.parametrize("study", STUDIES)
def test_ablate_smoke(tmp_path, study):
    cfg = tmp_path / "cfg.json"
    TINY.save(cfg)
    assert run("ablate", "--config", cfg, "--study", study, "--seeds", 1, "--steps", 10, "--out", tmp_path) == 0
    rows = list(csv.DictReader(io.StringIO((tmp_path / f"ablate-{study}.csv").read_text())))
    assert len(rows) == len(study_variants(study))
    for r in rows:
        assert r["study"] == study and r["seed"] == "0" and r["steps"] == "10"
        assert 0.0 <= float(r["map"]) <= 1.0
    assert (tmp_path / f"ablate-{study}.png").exists()


def test_ablate_reuses_cache(tmp_path):
    cfg = tmp_path / "cfg.json"
    TINY.save(cfg)
    args = ("ablate", "--config", cfg, "--study", "resp-max", "--seeds", 2, "--steps", 4, "--cache", tmp_path / "c")
    assert run(*args, "--out", tmp_path / "a") == 0
    n = len(list((tmp_path / "c").glob("*.ckpt")))
    assert run(*args, "--out", tmp_path / "b") == 0
    assert len(list((tmp_path / "c").glob("*.ckpt"))) == n
    assert (tmp_path / "a" / "ablate-resp-max.csv").read_bytes() == (tmp_path / "b" / "ablate-resp-max.csv").read_bytes()


# dump-resp -----------------------------------------------------------------


def test_gray_scaling():
    assert not cli.to_gray(np.zeros((4, 5))).any()
    img = np.zeros((6, 7))
    img[2, 5] = 0.3
    gray = cli.to_gray(img)
    assert gray[2, 5] == 255 and np.unravel_index(gray.argmax(), gray.shape) == (2, 5)
    assert cli.pgm_text(gray).splitlines()[:3] == ["P2", "7 6", "255"]


def test_dump_resp_matches_loop_mean(env):
    out, common = env
    assert run("train", *common, "--modality", "fusion", "--out", out) == 0
    assert run("dump-resp", *common, "--checkpoint", out / "fusion.ckpt", "--scene-index", 5, "--out", out) == 0
    det = Detector.load(out / "fusion.ckpt")
    scene = load_scenes(out / "scenes.bin")[5]
    resp = det.forward(prepare([scene], TINY.scenes).inputs(0)).resp.data
    want = np.zeros(resp.shape[1:])
    for i in range(resp.shape[1]):
        for j in range(resp.shape[2]):
            want[i, j] = sum(resp[k, i, j] for k in range(resp.shape[0])) / resp.shape[0]
    got = np.array([[float(v) for v in line.split(",")] for line in (out / "resp-5.csv").read_text().splitlines()])
    np.testing.assert_allclose(got, want, atol=1e-12)
    pgm = (out / "resp-5.pgm").read_text().split()
    assert pgm[:4] == ["P2", "16", "16", "255"]
    pixels = np.array(pgm[4:], dtype=int).reshape(16, 16)
    assert pixels.min() >= 0 and pixels.max() == 255
    assert np.unravel_index(pixels.argmax(), pixels.shape) == np.unravel_index(want.argmax(), want.shape)
    assert run("dump-resp", *common, "--checkpoint", out / "fusion.ckpt", "--scene-index", 99, "--out", out) == 1
