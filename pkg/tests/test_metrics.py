import csv
import io
import json
import math

import numpy as np
import pytest
from PIL import Image

import oracles
from docclean import metrics as MT
from docclean.errors import ConfigurationError, DatasetError

N_CASES = 200  # the 1000-case sweep lives in the acceptance suite


def _random_pairs(seed, n, binary=False):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        h, w = rng.integers(8, 17, size=2)
        if binary:
            p_ink = rng.uniform(0.05, 0.6)
            a = (rng.random((h, w)) > p_ink).astype(float)
            b = a.copy()
            flip = rng.random((h, w)) < rng.uniform(0, 0.3)
            b[flip] = 1 - b[flip]
            yield a, b
        else:
            yield rng.integers(0, 256, (h, w)).astype(float), rng.integers(0, 256, (h, w)).astype(float)


def test_fmeasure_oracle():
    for pred, gt in _random_pairs(0, N_CASES, binary=True):
        assert MT.fmeasure(pred, gt) == pytest.approx(oracles.fmeasure_loops(pred, gt), rel=1e-12, abs=1e-12)


def test_fmeasure_examples():
    gt = np.ones((8, 8))
    gt[:4] = 0
    assert MT.fmeasure(gt, gt) == 100
    assert MT.fmeasure(np.zeros((8, 8)), gt) == pytest.approx(200 / 3)
    assert MT.fmeasure(np.ones((4, 4)), np.ones((4, 4))) == 100
    assert MT.fmeasure(np.ones((8, 8)), gt) == 0
    with pytest.raises(ConfigurationError):
        MT.fmeasure(np.ones((4, 4)), np.ones((4, 5)))
    with pytest.raises(ConfigurationError):
        MT.fmeasure(np.full((4, 4), 0.5), np.ones((4, 4)))


def test_psnr_oracle_and_examples():
    for a, b in _random_pairs(1, N_CASES):
        assert MT.psnr(a, b) == pytest.approx(oracles.psnr_loops(a, b, 255), rel=1e-10)
    a = np.full((8, 8, 3), 100.0)
    assert MT.psnr(a, a) == math.inf
    assert MT.psnr(a, a + 16) == pytest.approx(20 * math.log10(255 / 16), abs=1e-9)
    assert MT.psnr(a + 16, a) == MT.psnr(a, a + 16)
    assert MT.psnr(a / 255, (a + 16) / 255, peak=1.0) == pytest.approx(20 * math.log10(255 / 16), abs=1e-9)


def test_psnr_decreases_with_nested_corruption():
    rng = np.random.default_rng(2)
    gt = rng.integers(0, 256, (16, 16)).astype(float)
    noise = rng.normal(0, 20, (16, 16))
    order = rng.permutation(256)
    values = []
    for k in range(1, 257, 15):
        x = gt.copy().ravel()
        x[order[:k]] += noise.ravel()[order[:k]]
        values.append(MT.psnr(x.reshape(16, 16), gt))
    assert all(a > b for a, b in zip(values, values[1:]))


def test_drd_weights():
    w = MT.drd_weights()
    assert w.shape == (5, 5) and w[2, 2] == 0 and w.sum() == pytest.approx(1)
    assert w[2, 3] == pytest.approx(2 * w[2, 4])
    assert w[1, 1] == pytest.approx(w[2, 3] / math.sqrt(2))


def test_drd_oracle():
    for pred, gt in _random_pairs(3, N_CASES, binary=True):
        if MT.nubn(gt) == 0 and not np.array_equal(pred, gt):
            continue
        assert MT.drd(pred, gt) == pytest.approx(oracles.drd_loops(pred, gt), rel=1e-12, abs=1e-15)


def test_drd_examples():
    gt = np.ones((16, 16))
    gt[2:5, 2:5] = 0                    # one non-uniform block
    assert MT.nubn(gt) == 1
    assert MT.drd(gt, gt) == 0
    # an isolated ink pixel predicted as background: its 5x5 GT neighbourhood
    # is all background, so every weighted term vanishes
    lone = np.ones((16, 16))
    lone[12, 12] = 0
    assert MT.nubn(lone) == 1
    assert MT.drd(np.ones((16, 16)), lone) == 0
    # the opposite flip (background predicted as ink) costs the full weight sum
    pred = gt.copy()
    pred[12, 12] = 0
    assert MT.drd(pred, gt) == pytest.approx(1.0)
    pred = gt.copy()
    pred[3, 5] = 0                      # flip next to the ink edge
    expected = oracles.drd_loops(pred, gt)
    assert expected > 0 and MT.drd(pred, gt) == pytest.approx(expected, rel=1e-12)
    w = MT.drd_weights()
    manual = sum(w[i, j] * abs(gt[3 + i - 2, 5 + j - 2] - 0) for i in range(5) for j in range(5))
    assert MT.drd(pred, gt) == pytest.approx(manual)


def test_drd_degenerate_and_nonbinary():
    uniform = np.ones((16, 16))
    assert MT.drd(uniform, uniform) == 0
    pred = uniform.copy()
    pred[0, 0] = 0
    with pytest.raises(ConfigurationError, match="degenerate"):
        MT.drd(pred, uniform)
    with pytest.raises(ConfigurationError):
        MT.drd(np.full((8, 8), 0.3), uniform[:8, :8])


def test_nubn_counts_partial_border_blocks():
    gt = np.ones((10, 10))
    gt[9, 9] = 0
    assert MT.nubn(gt) == 1


def test_fmeasure_drd_translation_invariance():
    rng = np.random.default_rng(4)
    gt = np.ones((16, 16))
    gt[4:12, 4:12] = (rng.random((8, 8)) > 0.5)
    pred = gt.copy()
    pred[6, 7] = 1 - pred[6, 7]
    big_gt, big_pred = np.ones((32, 32)), np.ones((32, 32))
    big_gt[8:24, 8:24], big_pred[8:24, 8:24] = gt, pred
    assert MT.fmeasure(pred, gt) == MT.fmeasure(big_pred, big_gt)
    shifted_gt, shifted_pred = np.roll(big_gt, (3, 5), (0, 1)), np.roll(big_pred, (3, 5), (0, 1))
    assert MT.fmeasure(shifted_pred, shifted_gt) == MT.fmeasure(big_pred, big_gt)
    # shift by whole blocks keeps the NUBN grid aligned
    assert MT.drd(np.roll(big_pred, (8, 8), (0, 1)), np.roll(big_gt, (8, 8), (0, 1))) == pytest.approx(
        MT.drd(big_pred, big_gt))


def test_ssim_oracle():
    for a, b in _random_pairs(5, 60):
        assert MT.ssim(a, b) == pytest.approx(oracles.ssim_loops(a, b, 255), rel=1e-9, abs=1e-12)


def test_ssim_examples():
    rng = np.random.default_rng(6)
    a, b = rng.random((16, 16)) * 255, rng.random((16, 16)) * 255
    assert MT.ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert MT.ssim(a, b) == pytest.approx(MT.ssim(b, a), rel=1e-12)
    c1, c2 = 60.0, 180.0
    C1 = (0.01 * 255) ** 2
    expected = (2 * c1 * c2 + C1) / (c1 ** 2 + c2 ** 2 + C1)
    assert MT.ssim(np.full((12, 12), c1), np.full((12, 12), c2)) == pytest.approx(expected, rel=1e-9)
    rgb = rng.random((16, 16, 3)) * 255
    assert MT.ssim(rgb, rgb * 0.9) == pytest.approx(MT.ssim(MT.luma(rgb), MT.luma(rgb) * 0.9), rel=1e-12)
    with pytest.raises(ConfigurationError):
        MT.ssim(a, b[:15])


def test_self_comparison():
    rng = np.random.default_rng(7)
    gt = (rng.random((16, 16)) > 0.4).astype(float)
    row = MT.compare(gt, gt, "binarize")
    assert (row["fmeasure"], row["drd"], row["psnr"]) == (100.0, 0.0, math.inf)
    assert row["ssim"] == pytest.approx(1.0)


def test_compare_thresholds_predictions_only_for_fmeasure():
    gt = np.ones((16, 16))
    gt[4:8, 4:8] = 0
    pred = np.where(gt == 0, 0.3, 0.8)
    row = MT.compare(pred, gt, "binarize")
    assert row["fmeasure"] == 100 and row["drd"] == 0
    assert row["psnr"] == pytest.approx(MT.psnr(pred * 255, gt * 255))
    gray = MT.compare(pred, gt, "gray")
    assert math.isnan(gray["fmeasure"]) and math.isnan(gray["drd"])
    with pytest.raises(ConfigurationError):
        MT.compare(pred, gt, "sepia")


def _save(path, arr):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr.astype(np.uint8)).save(path)


def _binary_img(seed):
    rng = np.random.default_rng(seed)
    a = np.full((16, 16), 255)
    a[rng.random((16, 16)) < 0.3] = 0
    return a


def test_evaluate_single_and_aggregate(tmp_path):
    g1, g2 = _binary_img(0), _binary_img(1)
    p1 = g1.copy()
    p1[3, 3] = 255 - p1[3, 3]
    _save(tmp_path / "gt" / "a.png", g1)
    _save(tmp_path / "gt" / "b.png", g2)
    _save(tmp_path / "pred" / "a.png", p1)
    one = MT.evaluate(str(tmp_path / "pred"), str(tmp_path / "gt"))
    assert len(one.rows) == 1 and one.errors == ["b: ground truth has no prediction"]
    agg = one.aggregate()
    assert all(agg[k] == one.rows[0][k] for k in MT.CSV_FIELDS[1:])
    _save(tmp_path / "pred" / "b.png", g2 * 0 + 255)
    two = MT.evaluate(str(tmp_path / "pred"), str(tmp_path / "gt"))
    assert not two.errors and [r["stem"] for r in two.rows] == ["a", "b"]
    for k in MT.CSV_FIELDS[1:]:
        assert two.aggregate()[k] == pytest.approx((two.rows[0][k] + two.rows[1][k]) / 2)


def test_evaluate_self_report_and_serialization(tmp_path):
    for s in range(2):
        _save(tmp_path / "gt" / f"p{s}.png", _binary_img(s))
    rep = MT.evaluate(str(tmp_path / "gt"), str(tmp_path / "gt"))
    rows = list(csv.DictReader(io.StringIO(rep.to_csv())))
    assert [r["stem"] for r in rows] == ["p0", "p1", "mean"]
    for r in rows:
        assert float(r["fmeasure"]) == 100 and float(r["drd"]) == 0
        assert r["psnr"] == "inf" and float(r["ssim"]) == pytest.approx(1)
    doc = json.loads(rep.to_json())
    assert doc["aggregate"]["psnr"] == "inf" and doc["psnr_peak"] == 255.0 and doc["task"] == "binarize"
    gray = MT.evaluate(str(tmp_path / "gt"), str(tmp_path / "gt"), task="gray", peak=1.0)
    row = list(csv.DictReader(io.StringIO(gray.to_csv())))[0]
    assert row["fmeasure"] == "nan" and row["drd"] == "nan"


def test_evaluate_missing_directory(tmp_path):
    with pytest.raises(DatasetError):
        MT.evaluate(str(tmp_path / "nope"), str(tmp_path))
