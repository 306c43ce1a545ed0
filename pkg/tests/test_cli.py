import csv
import io
import json
import os
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from docclean import checkpoint
from docclean import cli
from docclean import model as M
from docclean import perceptual as P


def _toy_dataset(root, n=2, size=(70, 90)):
    rng = np.random.default_rng(0)
    for d in ("noisy", "clean"):
        (root / d).mkdir(parents=True, exist_ok=True)
    for i in range(n):
        clean = np.full(size, 255, np.uint8)
        clean[rng.random(size) < 0.2] = 0
        noisy = np.clip(clean[:, :, None] * 0.7 + rng.integers(0, 60, size + (3,)), 0, 255).astype(np.uint8)
        Image.fromarray(clean).save(root / "clean" / f"p{i}.png")
        Image.fromarray(noisy).save(root / "noisy" / f"p{i}.png")
    return root


TRAIN_FAST = ["--scales", "1.0", "--batch-size", "1", "--max-steps", "2", "--augment-prob", "0"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    data = _toy_dataset(base / "toy", n=3)
    out = base / "run"
    code = cli.main(["train", "--variant", "m16", "--data", str(data), "--out", str(out), "--epochs", "2",
                     "--seed", "7", "--no-perceptual"] + TRAIN_FAST)
    assert code == 0
    return base, data, out


def test_train_outputs(trained):
    _, _, out = trained
    assert (out / "best.ckpt").is_file() and (out / "history.csv").is_file()
    rows = list(csv.DictReader(open(out / "history.csv")))
    assert [r["epoch"] for r in rows] == ["1"]
    manifest = cli.read_config(str(out / "run.cfg"))
    assert manifest["seed"] == "7" and manifest["variant"] == "m16" and manifest["lambda2"] == "0.0"
    _, meta = M.load_checkpoint(out / "best.ckpt")
    assert meta["variant"] == "M16" and meta["seed"] == 7


def test_train_logs_effective_weights(tmp_path, capsys):
    data = _toy_dataset(tmp_path / "toy")
    code = cli.main(["train", "--data", str(data), "--out", str(tmp_path / "r"), "--epochs", "1",
                     "--no-perceptual"] + TRAIN_FAST)
    assert code == 0
    assert "effective loss weights: (10, 0, 0)" in capsys.readouterr().err


def test_train_with_extractor(tmp_path, capsys):
    data = _toy_dataset(tmp_path / "toy")
    fx = tmp_path / "vgg.ckpt"
    checkpoint.save(fx, P.random_vgg19_tensors(seed=1), {"kind": "feature_extractor"})
    code = cli.main(["train", "--data", str(data), "--out", str(tmp_path / "r"), "--epochs", "1",
                     "--extractor", str(fx)] + TRAIN_FAST)
    assert code == 0
    assert "effective loss weights: (10, 0.1, 10)" in capsys.readouterr().err


def test_train_missing_clean_dir(tmp_path, capsys):
    (tmp_path / "toy" / "noisy").mkdir(parents=True)
    code = cli.main(["train", "--data", str(tmp_path / "toy"), "--out", str(tmp_path / "r"), "--no-perceptual"])
    assert code == 2
    assert str(tmp_path / "toy" / "clean") in capsys.readouterr().err


def test_train_requires_extractor_or_flag(tmp_path, capsys):
    data = _toy_dataset(tmp_path / "toy")
    assert cli.main(["train", "--data", str(data), "--out", str(tmp_path / "r")]) == 2
    assert "--no-perceptual" in capsys.readouterr().err


def test_config_file_and_flag_precedence(tmp_path):
    data = _toy_dataset(tmp_path / "toy")
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"# comment\ndata = {data}\nout = {tmp_path / 'from_cfg'}\nseed = 3\nepochs = 1\n"
                   "no_perceptual = true\nscales = 1.0\nbatch_size = 1\nmax_steps = 1\naugment_prob = 0\n")
    assert cli.main(["train", "--config", str(cfg), "--seed", "5"]) == 0
    manifest = cli.read_config(str(tmp_path / "from_cfg" / "run.cfg"))
    assert manifest["seed"] == "5" and manifest["epochs"] == "1"
    bad = tmp_path / "bad.cfg"
    bad.write_text("colour = red\n")
    assert cli.main(["train", "--config", str(bad)]) == 2
    assert cli.main(["train", "--config", str(tmp_path / "missing.cfg")]) == 2


def test_manifest_replay_reproduces_history(trained, tmp_path):
    _, _, out = trained
    text = (out / "run.cfg").read_text().replace(f"out = {out}", f"out = {tmp_path / 'replay'}")
    (tmp_path / "replay.cfg").write_text(text)
    assert cli.main(["--threads", "1", "train", "--config", str(tmp_path / "replay.cfg")]) == 0
    assert (tmp_path / "replay" / "history.csv").read_bytes() == (out / "history.csv").read_bytes()


def test_infer_file_and_directory(trained, tmp_path):
    _, data, out = trained
    ckpt = str(out / "best.ckpt")
    img = np.random.default_rng(0).integers(0, 256, (256, 256, 3), dtype=np.uint8)
    Image.fromarray(img).save(tmp_path / "in.png")
    assert cli.main(["infer", "--checkpoint", ckpt, str(tmp_path / "in.png"), str(tmp_path / "o.png")]) == 0
    assert Image.open(tmp_path / "o.png").size == (256, 256)
    assert cli.main(["infer", "--checkpoint", ckpt, "--binarize", str(tmp_path / "in.png"),
                     str(tmp_path / "b.png")]) == 0
    assert set(np.unique(np.asarray(Image.open(tmp_path / "b.png")))) <= {0, 255}
    assert cli.main(["infer", "--checkpoint", ckpt, "--stride", "128", str(data / "noisy"),
                     str(tmp_path / "outdir")]) == 0
    assert sorted(os.listdir(tmp_path / "outdir")) == ["p0.png", "p1.png", "p2.png"]
    assert Image.open(tmp_path / "outdir" / "p0.png").size == (90, 70)


def test_infer_errors(trained, tmp_path):
    _, data, out = trained
    ckpt = str(out / "best.ckpt")
    src = str(data / "noisy" / "p0.png")
    assert cli.main(["infer", "--checkpoint", ckpt, "--variant", "m64", src, str(tmp_path / "x.png")]) == 2
    assert cli.main(["infer", "--checkpoint", str(tmp_path / "none.ckpt"), src, str(tmp_path / "x.png")]) == 2
    (tmp_path / "junk.ckpt").write_bytes(b"garbage")
    assert cli.main(["infer", "--checkpoint", str(tmp_path / "junk.ckpt"), src, str(tmp_path / "x.png")]) == 2


def test_eval_reports(trained, tmp_path, capsys):
    _, data, _ = trained
    gt = str(data / "clean")
    capsys.readouterr()
    assert cli.main(["eval", "--pred", gt, "--gt", gt, "--json", str(tmp_path / "r.json"),
                     "--csv", str(tmp_path / "r.csv")]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert [r["stem"] for r in rows] == ["p0", "p1", "p2", "mean"]
    assert all(float(r["fmeasure"]) == 100 and float(r["drd"]) == 0 and r["psnr"] == "inf" for r in rows)
    assert json.loads((tmp_path / "r.json").read_text())["aggregate"]["psnr"] == "inf"
    assert (tmp_path / "r.csv").read_text().startswith("stem,fmeasure,psnr,drd,ssim")


def test_eval_unmatched_and_peak(trained, tmp_path, capsys):
    _, data, _ = trained
    pred = tmp_path / "pred"
    pred.mkdir()
    a = np.asarray(Image.open(data / "clean" / "p0.png")).astype(int)
    Image.fromarray(np.clip(a - 16, 0, 255).astype(np.uint8)).save(pred / "p0.png")
    Image.fromarray(a.astype(np.uint8)).save(pred / "extra.png")
    capsys.readouterr()
    assert cli.main(["eval", "--pred", str(pred), "--gt", str(data / "clean"), "--task", "gray",
                     "--peak", "1.0"]) == 2
    cap = capsys.readouterr()
    assert "extra" in cap.err and "p1" in cap.err
    rows = list(csv.DictReader(io.StringIO(cap.out)))
    assert rows[0]["stem"] == "p0"
    diff = np.clip(a - 16, 0, 255) - a
    expected = 10 * np.log10(1.0 / np.mean((diff / 255.0) ** 2))
    assert float(rows[0]["psnr"]) == pytest.approx(expected, rel=1e-6)  # images load as float32


def test_analyze(capsys, tmp_path):
    assert cli.main(["analyze", "--variant", "m64", "--out-channels", "3", "--json"]) == 0
    r = json.loads(capsys.readouterr().out)
    assert abs(r["params"] / 0.46e6 - 1) <= 0.05 and r["input_size"] == 256
    assert cli.main(["analyze", "--variant", "m16", "--out-channels", "3", "--input-size", "512", "--json"]) == 0
    r16 = json.loads(capsys.readouterr().out)
    assert abs(r16["params"] / 0.03e6 - 1) <= 0.15
    assert cli.main(["analyze", "--variant", "m16", "--out-channels", "3", "--json"]) == 0
    assert r16["mult_adds"] == 4 * json.loads(capsys.readouterr().out)["mult_adds"]
    assert cli.main(["analyze", "--variant", "m32"]) == 0
    text = capsys.readouterr().out
    assert "parameters" in text and "mult-adds" in text and "checkpoint size" in text and "enc1" in text
    assert cli.main(["analyze", "--variant", "m99"]) == 2


def test_import_weights_cli(tmp_path):
    np.savez(tmp_path / "w.npz", **P.random_vgg19_tensors(seed=2))
    assert cli.main(["import-weights", str(tmp_path / "w.npz"), str(tmp_path / "w.ckpt")]) == 0
    P.load_feature_extractor(tmp_path / "w.ckpt")
    assert cli.main(["import-weights", str(tmp_path / "nothing.npz"), str(tmp_path / "x.ckpt")]) in (2, 3)


def test_usage_errors():
    assert cli.main([]) == 2
    assert cli.main(["frobnicate"]) == 2
    assert cli.main(["--threads", "0", "analyze"]) == 2


def test_threads_env(monkeypatch):
    monkeypatch.setenv("DOCCLEAN_THREADS", "abc")
    assert cli.main(["analyze"]) == 2
    monkeypatch.setenv("DOCCLEAN_THREADS", "1")
    assert cli.main(["analyze", "--json"]) == 0


def test_console_script_entry_point():
    out = subprocess.run([sys.executable, "-m", "docclean.cli", "analyze", "--variant", "m16", "--json"],
                         capture_output=True, text=True)
    assert out.returncode == 0 and json.loads(out.stdout)["variant"] == "M16"
