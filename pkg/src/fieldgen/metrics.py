"""Image-quality metrics for generated fields: SSIM, MSE/PSNR, edge
fidelity and boundary accuracy, plus CSV aggregation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DimensionError, ParameterError

SSIM_SIGMA = 1.5
SSIM_RADIUS = 5  # 11 x 11 window
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
PSNR_CAP = 100.0
EDGE_THRESHOLD = 0.2
BAND_WIDTH = 2
METRIC_NAMES = ("ssim", "mse", "psnr_db", "edge_fidelity", "boundary_accuracy")


def _as_channels(img) -> np.ndarray:
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 2:
        return a[None]
    if a.ndim != 3:
        raise DimensionError(f"expected HxW or CxHxW image, got shape {a.shape}")
    return a


def _same_shape(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = _as_channels(a), _as_channels(b)
    if a.shape != b.shape:
        raise DimensionError(f"image extents differ: {a.shape} vs {b.shape}")
    return a, b


def _window_mean(x: np.ndarray) -> np.ndarray:
    """Gaussian-weighted local mean over the positions where the whole window fits."""
    out = ndimage.gaussian_filter(x, SSIM_SIGMA, truncate=SSIM_RADIUS / SSIM_SIGMA, mode="constant")
    r = SSIM_RADIUS
    return out[r:-r, r:-r]


def ssim(a, b) -> float:
    """Mean structural similarity (data range 1), averaged over channels."""
    a, b = _same_shape(a, b)
    if min(a.shape[1:]) <= 2 * SSIM_RADIUS:
        raise DimensionError(f"images must exceed {2 * SSIM_RADIUS + 1} pixels per side")
    scores = []
    for x, y in zip(a, b):
        mx, my = _window_mean(x), _window_mean(y)
        vx = _window_mean(x * x) - mx * mx
        vy = _window_mean(y * y) - my * my
        cxy = _window_mean(x * y) - mx * my
        num = (2 * mx * my + SSIM_C1) * (2 * cxy + SSIM_C2)
        den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2)
        scores.append(float(np.mean(num / den)))
    return float(np.mean(scores))


def mse_psnr(a, b) -> tuple[float, float]:
    a, b = _same_shape(a, b)
    m = float(np.mean((a - b) ** 2))
    psnr = PSNR_CAP if m < 1e-10 else min(PSNR_CAP, 10.0 * math.log10(1.0 / m))
    return m, psnr


def edge_map(img) -> np.ndarray:
    """Sobel magnitude of the channel mean, thresholded at 0.2 x its maximum."""
    gray = _as_channels(img).mean(axis=0)
    mag = np.hypot(ndimage.sobel(gray, axis=0, mode="nearest"), ndimage.sobel(gray, axis=1, mode="nearest"))
    peak = mag.max()
    if peak <= 1e-12:
        return np.zeros(gray.shape, dtype=bool)
    return mag > EDGE_THRESHOLD * peak


def iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def edge_fidelity(a, b) -> float:
    a, b = _same_shape(a, b)
    return float(iou(edge_map(a), edge_map(b)))


def boundary_band(sketch) -> np.ndarray:
    """Sketch outline dilated by ``BAND_WIDTH`` pixels."""
    s = np.asarray(sketch) > 0.5
    if not s.any():
        raise ParameterError("boundary band undefined for an empty sketch")
    outline = s & ~ndimage.binary_erosion(s, border_value=0)
    return ndimage.binary_dilation(outline, structure=np.ones((3, 3), bool), iterations=BAND_WIDTH)


def boundary_accuracy(generated, reference, sketch) -> float:
    """Edge-set IoU of generated vs. reference, restricted to the sketch band."""
    g, r = _same_shape(generated, reference)
    band = boundary_band(sketch)
    if band.shape != g.shape[1:]:
        raise DimensionError(f"sketch extents {band.shape} differ from image {g.shape[1:]}")
    return float(iou(edge_map(g) & band, edge_map(r) & band))


def evaluate_pair(generated, reference, sketch) -> dict[str, float]:
    m, p = mse_psnr(generated, reference)
    return {
        "ssim": ssim(generated, reference),
        "mse": m,
        "psnr_db": p,
        "edge_fidelity": edge_fidelity(generated, reference),
        "boundary_accuracy": boundary_accuracy(generated, reference, sketch),
    }


@dataclass
class MetricReport:
    rows: list[dict]

    def aggregate(self) -> dict[str, tuple[float, float, int]]:
        out = {}
        for name in METRIC_NAMES:
            vals = np.array([r[name] for r in self.rows], dtype=np.float64)
            if len(vals):
                out[name] = (float(vals.mean()), float(vals.std()), len(vals))
            else:
                out[name] = (float("nan"), float("nan"), 0)
        return out

    def mean(self, name: str) -> float:
        return self.aggregate()[name][0]

    def write_csv(self, path: str | Path) -> None:
        """Aggregate rows (``metric,mean,std,n``), then a per-sample table."""
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["metric", "mean", "std", "n"])
            for name, (mean, std, n) in self.aggregate().items():
                w.writerow([name, repr(mean), repr(std), n])
            w.writerow([])
            w.writerow(["sample", *METRIC_NAMES])
            for row in self.rows:
                w.writerow([row["sample"], *(repr(float(row[n])) for n in METRIC_NAMES)])


def read_report_csv(path: str | Path) -> tuple[dict, list[dict]]:
    """Parse a file written by :meth:`MetricReport.write_csv`."""
    with open(path, newline="") as f:
        lines = list(csv.reader(f))
    split = lines.index([])
    agg = {r[0]: (float(r[1]), float(r[2]), int(r[3])) for r in lines[1:split]}
    header = lines[split + 1]
    rows = [dict(zip(header, r)) for r in lines[split + 2 :]]
    for r in rows:
        for n in METRIC_NAMES:
            r[n] = float(r[n])
    return agg, rows
