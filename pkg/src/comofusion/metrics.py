"""No-reference and source-referenced fusion quality metrics.

All metrics work on intensities in [0, 255]. GrayImage arguments are
converted with :func:`comofusion.imgcore.to_byte`; bare arrays are assumed to
be on that scale already. Every metric is higher-is-better.
"""
import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import ImageReadError, ValidationError
from .imgcore import GrayImage, list_images, load_gray, to_byte

METRICS = ("en", "sf", "ag", "sd", "qabf", "ssim")

# Edge-preservation sigmoid constants (strength, orientation).
QABF_KG, QABF_SG = -15.0, 0.5
QABF_KA, QABF_SA = -22.0, 0.8
# Normalisers making Q = 1 for perfectly preserved edges. Their reciprocals
# are the customary 0.9994 / 0.9879 gains rounded to four digits.
QABF_NORM_G = 1.0 + math.exp(QABF_KG * (1.0 - QABF_SG))
QABF_NORM_A = 1.0 + math.exp(QABF_KA * (1.0 - QABF_SA))

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = (0.01 * 255) ** 2
SSIM_C2 = (0.03 * 255) ** 2


def _byte(img):
    if isinstance(img, GrayImage):
        return np.ascontiguousarray(to_byte(img))
    arr = np.ascontiguousarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"expected a 2-D image, got shape {arr.shape}")
    return arr


def _same_shape(*arrs):
    if len({a.shape for a in arrs}) != 1:
        raise ValidationError(f"shape mismatch: {[a.shape for a in arrs]}")


def _at_least(arr, n):
    if arr.shape[0] < n or arr.shape[1] < n:
        raise ValidationError(f"image {arr.shape} smaller than {n}x{n}")


def entropy(img):
    """Base-2 Shannon entropy of the 256-bin histogram of rounded intensities."""
    levels = np.clip(np.rint(_byte(img)), 0, 255).astype(np.int64)
    counts = _kernels.histogram256(levels)
    p = counts[counts > 0] / levels.size
    return float(-np.sum(p * np.log2(p)))


def spatial_frequency(img):
    arr = _byte(img)
    _at_least(arr, 2)
    rf2, cf2 = _kernels.sf_terms(arr)
    return math.sqrt(rf2 + cf2)


def average_gradient(img):
    """Mean of sqrt((dx^2 + dy^2) / 2) with forward differences over the (H-1) x (W-1) interior."""
    arr = _byte(img)
    _at_least(arr, 2)
    return float(_kernels.average_gradient(arr))


def std_dev(img):
    """Population standard deviation."""
    return float(np.std(_byte(img)))


def qabf(vis, ir, fused):
    """Edge-strength-weighted edge preservation of both sources in the fused image, in [0, 1]."""
    a, b, f = _byte(vis), _byte(ir), _byte(fused)
    _same_shape(a, b, f)
    _at_least(a, 3)
    ax, ay = _kernels.sobel(a)
    bx, by = _kernels.sobel(b)
    fx, fy = _kernels.sobel(f)
    num, den = _kernels.qabf_sums(
        ax, ay, bx, by, fx, fy, QABF_KG, QABF_SG, QABF_KA, QABF_SA, QABF_NORM_G, QABF_NORM_A
    )
    if den == 0.0:
        # flat sources: nothing to preserve, so only a flat result is faithful
        return 1.0 if not (np.any(fx) or np.any(fy)) else 0.0
    return float(min(1.0, max(0.0, num / den)))


def gaussian_taps(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def ssim(a, b):
    """Mean SSIM over all fully contained 11x11 Gaussian windows."""
    a, b = _byte(a), _byte(b)
    _same_shape(a, b)
    _at_least(a, SSIM_WINDOW)
    taps = gaussian_taps()
    filt = _kernels.filter_valid
    mu_a, mu_b = filt(a, taps), filt(b, taps)
    var_a = filt(a * a, taps) - mu_a * mu_a
    var_b = filt(b * b, taps) - mu_b * mu_b
    cov = filt(a * b, taps) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def ssim_fusion(vis, ir, fused):
    return 0.5 * (ssim(fused, vis) + ssim(fused, ir))


def all_metrics(vis, ir, fused):
    return {
        "en": entropy(fused),
        "sf": spatial_frequency(fused),
        "ag": average_gradient(fused),
        "sd": std_dev(fused),
        "qabf": qabf(vis, ir, fused),
        "ssim": ssim_fusion(vis, ir, fused),
    }


REPORT_SCHEMA = {
    "type": "object",
    "required": ["meta", "records", "aggregate", "errors"],
    "properties": {
        "meta": {
            "type": "object",
            "required": ["dataset", "method", "timestamp"],
        },
        "records": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name", *METRICS],
                "properties": {"name": {"type": "string"}, **{m: {"type": "number"} for m in METRICS}},
            },
        },
        "aggregate": {
            "type": "object",
            "properties": {m: {"type": "number"} for m in METRICS},
        },
        "errors": {
            "type": "array",
            "items": {"type": "object", "required": ["name", "error"]},
        },
    },
}


@dataclass
class MetricsReport:
    records: list = field(default_factory=list)
    errors: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def aggregate(self):
        if not self.records:
            return {}
        return {m: float(np.mean([r[m] for r in self.records])) for m in METRICS}

    def to_dict(self):
        return {"meta": self.meta, "records": self.records, "aggregate": self.aggregate, "errors": self.errors}

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["name", *METRICS])
            writer.writeheader()
            writer.writerows(self.records)


def rank_methods(reports):
    """Order method names best-first for every metric, from a {method: MetricsReport} map."""
    return {
        m: sorted(reports, key=lambda name: reports[name].aggregate[m], reverse=True)
        for m in METRICS
    }


def _evaluate_one(name, fused_dir, vis_dir, ir_dir):
    try:
        fused = load_gray(Path(fused_dir) / name)
        vis = load_gray(Path(vis_dir) / name)
        ir = load_gray(Path(ir_dir) / name)
        return {"name": name, **all_metrics(vis, ir, fused)}
    except (ValidationError, ImageReadError) as exc:
        return {"name": name, "error": str(exc)}


def evaluate(fused_dir, vis_dir, ir_dir, method="comofusion", dataset=None, workers=1):
    """Score every fused image that has same-named visible and infrared sources.

    Unmatched or unreadable files are listed under ``errors``; the report
    still covers every pair that could be scored. Records are sorted by name.
    """
    fused, vis, ir = list_images(fused_dir), list_images(vis_dir), list_images(ir_dir)
    matched = sorted(fused.keys() & vis.keys() & ir.keys())
    errors = [
        {"name": n, "error": "missing in " + ", ".join(
            d for d, names in (("fused", fused), ("vis", vis), ("ir", ir)) if n not in names)}
        for n in sorted((fused.keys() | vis.keys() | ir.keys()) - set(matched))
    ]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(lambda n: _evaluate_one(n, fused_dir, vis_dir, ir_dir), matched))
    records = sorted((r for r in results if "error" not in r), key=lambda r: r["name"])
    errors += [r for r in results if "error" in r]
    meta = {
        "dataset": dataset or str(Path(vis_dir).parent.name),
        "method": method,
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "kernel_backend": _kernels.BACKEND,
    }
    return MetricsReport(records, sorted(errors, key=lambda e: e["name"]), meta)
