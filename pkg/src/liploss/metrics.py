"""Image-domain and projection-domain error metrics.

All functions take the prediction first and the reference second; the
reference's dynamic range normalizes NMAE, LINMAE and PSNR.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, UsageError
from .losses import lip_loss
from .projector import AngleSet, make_angle_set, project

METRIC_NAMES = ("nmae", "mse", "psnr", "ssim", "linmae", "limse")

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


class UndefinedMetricError(UsageError):
    """The reference is constant, so a range-normalized metric has no value."""


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {y.shape}")
    return x, y


def _range(y) -> float:
    r = float(np.max(y) - np.min(y))
    if r <= 0:
        raise UndefinedMetricError("reference has zero dynamic range")
    return r


def nmae(x, y) -> float:
    x, y = _pair(x, y)
    return float(np.sum(np.abs(x - y)) / (y.size * _range(y)))


def mse(x, y) -> float:
    x, y = _pair(x, y)
    return float(np.mean((x - y) ** 2))


def psnr(x, y) -> float:
    """``10 log10(L^2 / mse)`` with ``L`` the reference range; ``inf`` when mse is 0."""
    x, y = _pair(x, y)
    err = mse(x, y)
    if err == 0:
        return math.inf
    return float(10 * math.log10(_range(y) ** 2 / err))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    t = np.arange(size) - (size - 1) / 2
    w = np.exp(-(t ** 2) / (2 * sigma ** 2))
    return w / w.sum()


def _filter_valid(a: np.ndarray, w: np.ndarray) -> np.ndarray:
    # separable weighted mean over every fully contained window
    for ax in range(a.ndim):
        a = np.apply_along_axis(lambda v: np.correlate(v, w, mode="valid"), ax, a)
    return a


def ssim(x, y, data_range: float | None = None) -> float:
    """Mean local SSIM, Gaussian window (11 taps, sigma 1.5), valid windows only."""
    x, y = _pair(x, y)
    if any(n < SSIM_WINDOW for n in x.shape):
        raise ShapeError(f"image {x.shape} smaller than the {SSIM_WINDOW}-sample SSIM window")
    L = _range(y) if data_range is None else float(data_range)
    c1 = (SSIM_K1 * L) ** 2
    c2 = (SSIM_K2 * L) ** 2
    w = gaussian_window()
    mx = _filter_valid(x, w)
    my = _filter_valid(y, w)
    sxx = _filter_valid(x * x, w) - mx * mx
    syy = _filter_valid(y * y, w) - my * my
    sxy = _filter_valid(x * y, w) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def linmae(x, y, angles: AngleSet | None = None, voxel_width: float = 1.0) -> float:
    x, y = _pair(x, y)
    angles = make_angle_set(4) if angles is None else angles
    total = 0.0
    for a in angles:
        px = project(x, a, voxel_width)
        py = project(y, a, voxel_width)
        span = float(np.max(py) - np.min(py))
        if span <= 0:
            raise UndefinedMetricError(f"reference projection at {a} degrees is constant")
        total += float(np.sum(np.abs(px - py)) / (py.size * span))
    return total / len(angles)


def limse(x, y, angles: AngleSet | None = None, voxel_width: float = 1.0) -> float:
    x, y = _pair(x, y)
    return lip_loss(x, y, angles, voxel_width).item()


def all_metrics(x, y, angles: AngleSet | None = None, voxel_width: float = 1.0) -> dict[str, float]:
    return {
        "nmae": nmae(x, y),
        "mse": mse(x, y),
        "psnr": psnr(x, y),
        "ssim": ssim(x, y),
        "linmae": linmae(x, y, angles, voxel_width),
        "limse": limse(x, y, angles, voxel_width),
    }


def _spread(values: list[float]) -> float:
    if all(v == values[0] for v in values):
        return 0.0
    return float(np.std(values))


@dataclass
class MetricsReport:
    ids: list[str]
    rows: list[dict[str, float]]
    mean: dict[str, float] = field(default_factory=dict)
    std: dict[str, float] = field(default_factory=dict)

    def column(self, name: str) -> list[float]:
        return [r[name] for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("id",) + METRIC_NAMES)
        for ident, row in zip(self.ids, self.rows):
            writer.writerow([ident] + [format_value(row[m]) for m in METRIC_NAMES])
        writer.writerow(["mean"] + [format_value(self.mean[m]) for m in METRIC_NAMES])
        writer.writerow(["std"] + [format_value(self.std[m]) for m in METRIC_NAMES])
        return buf.getvalue()


def format_value(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return "%.17g" % v


def evaluate_report(preds, truths, angles: AngleSet | None = None, voxel_width: float = 1.0,
                    ids=None) -> MetricsReport:
    """Per-volume metrics plus mean and (population) standard deviation."""
    preds, truths = list(preds), list(truths)
    if not preds:
        raise UsageError("empty evaluation set")
    if len(preds) != len(truths):
        raise UsageError(f"{len(preds)} predictions for {len(truths)} references")
    ids = [str(i) for i in range(len(preds))] if ids is None else [str(i) for i in ids]
    rows = [all_metrics(p, t, angles, voxel_width) for p, t in zip(preds, truths)]
    report = MetricsReport(ids, rows)
    for m in METRIC_NAMES:
        vals = report.column(m)
        report.mean[m] = float(np.mean(vals)) if not all(math.isinf(v) for v in vals) else vals[0]
        report.std[m] = _spread(vals)
    return report
