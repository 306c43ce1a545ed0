"""Binarization and restoration metrics: F-measure, PSNR, DRD, SSIM.

Binary images use ink = 0 and background = 1.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .data import IMAGE_EXTENSIONS, load_image
from .errors import ConfigurationError, DatasetError

TASKS = ("binarize", "gray", "color")
CSV_FIELDS = ("stem", "fmeasure", "psnr", "drd", "ssim")


def _pair(pred, gt):
    a, b = np.asarray(pred, np.float64), np.asarray(gt, np.float64)
    if a.shape != b.shape:
        raise ConfigurationError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return a, b


def _binary(x, name):
    if not np.all((x == 0) | (x == 1)):
        raise ConfigurationError(f"{name} is not binary (values must be 0 or 1)")


def fmeasure(pred, gt):
    """F-measure in percent over ink pixels."""
    p, g = _pair(pred, gt)
    _binary(p, "prediction")
    _binary(g, "ground truth")
    fp_ink, gt_ink = p == 0, g == 0
    n_pred, n_gt = int(fp_ink.sum()), int(gt_ink.sum())
    if n_pred == 0 and n_gt == 0:
        return 100.0
    if n_pred == 0 or n_gt == 0:
        return 0.0
    tp = int((fp_ink & gt_ink).sum())
    if tp == 0:
        return 0.0
    precision, recall = tp / n_pred, tp / n_gt
    return 100.0 * 2 * precision * recall / (precision + recall)


def psnr(pred, gt, peak=255.0):
    """PSNR in dB; ``inf`` for identical inputs."""
    p, g = _pair(pred, gt)
    mse = float(np.mean((p - g) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def drd_weights(n=2):
    """Normalized reciprocal-distance weights on a (2n+1)^2 window, center 0."""
    i, j = np.mgrid[-n:n + 1, -n:n + 1]
    d = np.hypot(i, j)
    w = np.divide(1.0, d, out=np.zeros_like(d), where=d > 0)
    return w / w.sum()


def nubn(gt, block=8):
    """Count of ``block`` x ``block`` tiles holding both ink and background.

    Partial tiles at the right/bottom border count like full ones.
    """
    g = np.asarray(gt)
    h, w = g.shape
    count = 0
    for y in range(0, h, block):
        for x in range(0, w, block):
            t = g[y:y + block, x:x + block]
            if t.min() != t.max():
                count += 1
    return count


def drd(pred, gt):
    """Distance-reciprocal distortion; out-of-image neighbours count as background."""
    p, g = _pair(pred, gt)
    if p.ndim != 2:
        raise ConfigurationError("drd expects single-channel (h, w) images")
    _binary(p, "prediction")
    _binary(g, "ground truth")
    flips = np.argwhere(p != g)
    nb = nubn(g)
    if len(flips) == 0:
        return 0.0
    if nb == 0:
        raise ConfigurationError("degenerate ground truth: no non-uniform 8x8 blocks but prediction differs")
    wts = drd_weights()
    padded = np.pad(g, 2, constant_values=1.0)
    total = 0.0
    for y, x in flips:
        win = padded[y:y + 5, x:x + 5]
        total += float((wts * np.abs(win - p[y, x])).sum())
    return total / nb


def luma(x):
    x = np.asarray(x, np.float64)
    if x.ndim == 3 and x.shape[2] == 3:
        return x @ np.array([0.299, 0.587, 0.114])
    if x.ndim == 3 and x.shape[2] == 1:
        return x[:, :, 0]
    return x


def ssim(pred, gt, peak=255.0, sigma=1.5, radius=5, k1=0.01, k2=0.03):
    """Mean SSIM with an 11x11 Gaussian window (symmetric reflection at borders).

    Colour inputs are reduced to luma first.
    """
    p, g = _pair(luma(pred), luma(gt))
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2

    def f(z):
        return ndimage.gaussian_filter(z, sigma, mode="reflect", truncate=radius / sigma)

    mp, mg = f(p), f(g)
    vp = f(p * p) - mp * mp
    vg = f(g * g) - mg * mg
    cov = f(p * g) - mp * mg
    s = ((2 * mp * mg + c1) * (2 * cov + c2)) / ((mp * mp + mg * mg + c1) * (vp + vg + c2))
    return float(np.clip(s.mean(), -1.0, 1.0))


# ---------------------------------------------------------------- reports


@dataclass
class MetricReport:
    task: str
    peak: float
    rows: list = field(default_factory=list)
    errors: list = field(default_factory=list)

    def aggregate(self):
        if not self.rows:
            return None
        agg = {"stem": "mean"}
        for k in CSV_FIELDS[1:]:
            agg[k] = float(np.mean([r[k] for r in self.rows]))
        return agg

    def all_rows(self):
        agg = self.aggregate()
        return self.rows + ([agg] if agg else [])

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in self.all_rows():
            w.writerow([r["stem"]] + [_fmt(r[k]) for k in CSV_FIELDS[1:]])
        return buf.getvalue()

    def to_json(self):
        doc = {
            "task": self.task,
            "psnr_peak": self.peak,
            "rows": [{k: (r[k] if k == "stem" else _fmt(r[k])) for k in CSV_FIELDS} for r in self.rows],
            "aggregate": None,
            "errors": self.errors,
        }
        agg = self.aggregate()
        if agg:
            doc["aggregate"] = {k: _fmt(v) for k, v in agg.items() if k != "stem"}
        return json.dumps(doc, indent=2)


def _fmt(v):
    # inf/nan are written as literal strings in both CSV and JSON
    if isinstance(v, float) and (math.isinf(v) or math.isnan(v)):
        return "inf" if v > 0 else ("-inf" if v < 0 else "nan")
    return v


def compare(pred, gt, task="binarize", peak=255.0, threshold=0.5):
    """Metrics for one pair of [0, 1] images.

    F-measure and DRD are only defined for the binarization task (NaN
    otherwise); PSNR and SSIM use the continuous values scaled to ``peak``.
    """
    if task not in TASKS:
        raise ConfigurationError(f"task must be one of {TASKS}, got {task!r}")
    pred, gt = _pair(pred, gt)
    row = {"psnr": psnr(pred * peak, gt * peak, peak), "ssim": ssim(pred * peak, gt * peak, peak)}
    if task == "binarize":
        pb = np.where(luma(pred) < threshold, 0.0, 1.0)
        gb = np.where(luma(gt) < threshold, 0.0, 1.0)
        row["fmeasure"] = fmeasure(pb, gb)
        row["drd"] = drd(pb, gb)
    else:
        row["fmeasure"] = row["drd"] = math.nan
    return row


def _stems(directory):
    out = {}
    for name in sorted(os.listdir(directory)):
        stem, ext = os.path.splitext(name)
        if ext.lower() in IMAGE_EXTENSIONS:
            out.setdefault(stem, os.path.join(directory, name))
    return out


def evaluate(pred_dir, gt_dir, task="binarize", peak=255.0, threshold=0.5) -> MetricReport:
    """Per-image metrics over matching stems plus an unweighted mean.

    Unmatched stems and per-pair failures are recorded in ``errors``;
    matched pairs are still evaluated.
    """
    for d in (pred_dir, gt_dir):
        if not os.path.isdir(d):
            raise DatasetError([f"missing directory: {d}"])
    preds, gts = _stems(pred_dir), _stems(gt_dir)
    report = MetricReport(task, peak)
    for stem in sorted(set(preds) - set(gts)):
        report.errors.append(f"{stem}: prediction has no ground truth")
    for stem in sorted(set(gts) - set(preds)):
        report.errors.append(f"{stem}: ground truth has no prediction")
    channels = 3 if task == "color" else 1
    for stem in sorted(set(preds) & set(gts)):
        try:
            row = compare(load_image(preds[stem], channels), load_image(gts[stem], channels),
                          task, peak, threshold)
        except (ConfigurationError, OSError) as exc:
            report.errors.append(f"{stem}: {exc}")
            continue
        row["stem"] = stem
        report.rows.append(row)
    return report
