"""Image quality metrics and metric-table summaries."""

import csv
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

SSIM_DEFAULTS = {"window": 11, "sigma": 1.5, "k1": 0.01, "k2": 0.03, "dynamic_range": 400.0}
CSV_COLUMNS = ("case_id", "method", "layer", "rmse", "snr", "ssim")


def _pair(xhat, xstar):
    a = np.asarray(xhat, dtype=np.float64)
    b = np.asarray(xstar, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def rmse(xhat, xstar):
    a, b = _pair(xhat, xstar)
    return math.sqrt(float(np.sum((a - b) ** 2)) / a.size)


def snr(xhat, xstar):
    """10 log10(||x*||^2 / ||xhat - x*||^2) in dB; +inf for a perfect match."""
    a, b = _pair(xhat, xstar)
    ref = float(np.sum(b ** 2))
    if ref == 0:
        raise ValueError("reference image is zero")
    err = float(np.sum((a - b) ** 2))
    if err == 0:
        return math.inf
    return 10.0 * math.log10(ref / err)


def gaussian_window(size, sigma):
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-r ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def ssim(xhat, xstar, window=11, sigma=1.5, k1=0.01, k2=0.03, dynamic_range=400.0):
    """Mean SSIM over all fully-inside Gaussian windows."""
    a, b = _pair(xhat, xstar)
    if window > min(a.shape):
        raise ValueError("SSIM window larger than the image")
    g = gaussian_window(window, sigma)
    h = window // 2

    def filt(img):
        out = correlate1d(correlate1d(img, g, axis=0, mode="constant"), g, axis=1, mode="constant")
        lo_r, lo_c = h, h
        return out[lo_r:a.shape[0] - (window - 1 - h), lo_c:a.shape[1] - (window - 1 - h)]

    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2
    ma, mb = filt(a), filt(b)
    va = filt(a * a) - ma ** 2
    vb = filt(b * b) - mb ** 2
    cov = filt(a * b) - ma * mb
    s = ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2))
    return float(s.mean())


@dataclass(frozen=True)
class RoiSpec:
    row0: int
    col0: int
    rows: int
    cols: int
    label: str = "roi"

    def slices(self, shape):
        if self.rows < 1 or self.cols < 1 or self.row0 < 0 or self.col0 < 0 \
                or self.row0 + self.rows > shape[0] or self.col0 + self.cols > shape[1]:
            raise ValueError(f"ROI {self.label} outside image of shape {shape}")
        return slice(self.row0, self.row0 + self.rows), slice(self.col0, self.col0 + self.cols)


def bias_std(xhat, xstar, roi):
    """(bias, std, B-S index) of xhat inside the ROI; std uses ddof=1."""
    a, b = _pair(xhat, xstar)
    s = roi.slices(a.shape)
    bias = float(np.mean(a[s] - b[s]))
    std = float(np.std(a[s], ddof=1)) if a[s].size > 1 else 0.0
    return bias, std, math.hypot(bias, std)


def evaluate(xhat, xstar, ssim_kw=None):
    return {"rmse": rmse(xhat, xstar), "snr": snr(xhat, xstar),
            "ssim": ssim(xhat, xstar, **(ssim_kw or {}))}


def write_metrics_csv(path, rows):
    """rows: dicts with the CSV_COLUMNS keys."""
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(r[k])) if k in ("rmse", "snr", "ssim") else r[k])
                        for k in CSV_COLUMNS})


def read_metrics_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(CSV_COLUMNS) - set(reader.fieldnames):
            raise ValueError(f"{path}: expected columns {', '.join(CSV_COLUMNS)}")
        rows = []
        for i, r in enumerate(reader):
            try:
                rows.append({"case_id": r["case_id"], "method": r["method"], "layer": int(r["layer"]),
                             **{k: float(r[k]) for k in ("rmse", "snr", "ssim")}})
            except (TypeError, ValueError) as e:
                raise ValueError(f"{path}: bad row {i + 1}: {e}") from None
    return rows


def describe(values):
    v = np.sort(np.asarray(values, dtype=np.float64))
    return {"n": int(v.size), "mean": float(v.mean()), "median": float(np.median(v)),
            "q1": float(np.percentile(v, 25)), "q3": float(np.percentile(v, 75)),
            "min": float(v[0]), "max": float(v[-1])}


def summarize(rows):
    """Per-method statistics of the final-layer rows (highest layer per case)."""
    if not rows:
        raise ValueError("no metric rows")
    final = {}
    for r in rows:
        key = (r["method"], r["case_id"])
        if key not in final or r["layer"] > final[key]["layer"]:
            final[key] = r
    out = {}
    for method in sorted({m for m, _ in final}):
        sel = [r for (m, _), r in final.items() if m == method]
        out[method] = {k: describe([r[k] for r in sel]) for k in ("rmse", "snr", "ssim")}
    out["_ssim"] = dict(SSIM_DEFAULTS)
    return out


def write_summary(path, summary):
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, default=float)
