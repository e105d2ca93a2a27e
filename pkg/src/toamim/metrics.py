"""Evaluation metrics: SSIM, masked L1, mIoU, confusion rates and ROC/AUC."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DomainError, ParameterError

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5

CSV_SCHEMA_VERSION = 1
CSV_COLUMNS = (
    "schema_version", "run", "model", "ssim_mean", "l1_masked", "miou", "accuracy",
    "false_negative_rate", "false_positive_rate", "auc",
    *(f"ssim_ch{i:02d}" for i in range(14)),
)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    r = len(g) // 2
    out = ndimage.correlate1d(img, g, axis=0, mode="constant")
    out = ndimage.correlate1d(out, g, axis=1, mode="constant")
    return out[r:img.shape[0] - r, r:img.shape[1] - r]


def _ssim_2d(a, b, g, c1, c2) -> float:
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim_per_channel(a, b, window: int = SSIM_WINDOW, k1: float = SSIM_K1, k2: float = SSIM_K2,
                     dynamic_range: float = 1.0, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """SSIM of each channel of two H x W x C images (Gaussian window, valid region)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ParameterError(f"shape mismatch {a.shape} vs {b.shape}")
    if dynamic_range <= 0:
        raise ParameterError("dynamic_range must be positive")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < window:
        raise ParameterError(f"image {a.shape[:2]} smaller than the {window}-pixel window")
    g = gaussian_window(window, sigma)
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2
    return np.array([_ssim_2d(a[..., i], b[..., i], g, c1, c2) for i in range(a.shape[-1])])


def ssim(a, b, window: int = SSIM_WINDOW, k1: float = SSIM_K1, k2: float = SSIM_K2,
         dynamic_range: float = 1.0, sigma: float = SSIM_SIGMA) -> float:
    """Mean structural similarity; multi-band images average the per-channel values."""
    return float(np.mean(ssim_per_channel(a, b, window, k1, k2, dynamic_range, sigma)))


def _binary_pair(pred, gt):
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ParameterError(f"shape mismatch {p.shape} vs {g.shape}")
    return p, g


def class_iou(pred, gt) -> tuple[float, float]:
    """(IoU of clear, IoU of cloud); a class absent from both counts as 1."""
    p, g = _binary_pair(pred, gt)
    out = []
    for pc, gc in ((~p, ~g), (p, g)):
        union = np.count_nonzero(pc | gc)
        out.append(1.0 if union == 0 else np.count_nonzero(pc & gc) / union)
    return out[0], out[1]


def miou(pred, gt) -> float:
    clear, cloud = class_iou(pred, gt)
    return (clear + cloud) / 2.0


@dataclass(frozen=True)
class Confusion:
    accuracy: float
    false_positive_rate: float
    false_negative_rate: float
    tp: int
    fp: int
    tn: int
    fn: int


def confusion(pred, gt) -> Confusion:
    """Confusion-matrix rates with cloud (1) as the positive class.

    A rate whose denominator is empty is reported as 0.
    """
    p, g = _binary_pair(pred, gt)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    tn = int(np.count_nonzero(~p & ~g))
    fn = int(np.count_nonzero(~p & g))
    total = tp + fp + tn + fn
    acc = (tp + tn) / total if total else 1.0
    fpr = fp / (fp + tn) if (fp + tn) else 0.0
    fnr = fn / (fn + tp) if (fn + tp) else 0.0
    return Confusion(acc, fpr, fnr, tp, fp, tn, fn)


def accuracy(pred, gt) -> float:
    return confusion(pred, gt).accuracy


def roc_auc(scores, labels) -> tuple[np.ndarray, float]:
    """ROC points over every distinct score threshold (plus both infinities) and trapezoidal AUC.

    Returns ``(points, auc)`` with ``points`` an (M, 2) array of (fpr, tpr)
    sorted by increasing fpr.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    if s.shape != y.shape:
        raise ParameterError("scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DomainError("ROC needs both classes among the labels")
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    tps = np.cumsum(y_sorted)
    fps = np.cumsum(~y_sorted)
    # last index of each run of equal scores = one threshold
    last = np.r_[np.flatnonzero(np.diff(s_sorted)), len(s_sorted) - 1]
    tpr = np.r_[0.0, tps[last] / n_pos]
    fpr = np.r_[0.0, fps[last] / n_neg]
    points = np.stack([fpr, tpr], axis=1)
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    return points, auc


@dataclass
class MetricsReport:
    ssim_per_channel: list[float] = field(default_factory=lambda: [float("nan")] * 14)
    ssim_mean: float = float("nan")
    l1_masked: float = float("nan")
    miou: float = float("nan")
    accuracy: float = float("nan")
    false_negative_rate: float = float("nan")
    false_positive_rate: float = float("nan")
    roc_points: list[tuple[float, float]] = field(default_factory=list)
    auc: float = float("nan")

    def csv_row(self, run: str, model: str) -> dict:
        row = {
            "schema_version": CSV_SCHEMA_VERSION, "run": run, "model": model,
            "ssim_mean": self.ssim_mean, "l1_masked": self.l1_masked, "miou": self.miou,
            "accuracy": self.accuracy, "false_negative_rate": self.false_negative_rate,
            "false_positive_rate": self.false_positive_rate, "auc": self.auc,
        }
        for i, v in enumerate(self.ssim_per_channel):
            row[f"ssim_ch{i:02d}"] = v
        return {k: _fmt(v) for k, v in row.items()}

    def to_json(self) -> dict:
        d = asdict(self)
        d["roc_points"] = [[float(a), float(b)] for a, b in self.roc_points]
        return d


def _fmt(v):
    if isinstance(v, float):
        return "nan" if np.isnan(v) else repr(round(v, 10))
    return v


def write_metrics_csv(path, rows: list[dict]) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def write_roc_json(path, reports: dict[str, MetricsReport]) -> None:
    doc = {name: {"auc": r.auc, "roc_points": r.to_json()["roc_points"]} for name, r in reports.items()}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
