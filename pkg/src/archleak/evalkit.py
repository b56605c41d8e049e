"""Attack and reconstruction metrics: ROC/AUC, TPR at low FPR, MSE/PSNR/SSIM, F1."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F


class MetricError(ValueError):
    pass


@dataclass
class RocCurve:
    thresholds: np.ndarray  # descending; +inf first
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float


def roc(scores, labels) -> RocCurve:
    """Threshold sweep where a sample is called positive when ``score >= threshold``."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).astype(bool).ravel()
    if scores.shape != labels.shape:
        raise MetricError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("roc needs both positive and negative labels")
    order = np.argsort(-scores, kind="mergesort")
    s, lab = scores[order], labels[order]
    # last index of each run of tied scores
    ends = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = np.cumsum(lab)[ends]
    fp = np.cumsum(~lab)[ends]
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    thresholds = np.r_[np.inf, s[ends]]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
    return RocCurve(thresholds, fpr, tpr, auc)


def tpr_at_fpr(curve: RocCurve, fpr_target: float) -> float:
    """Largest TPR among operating points with FPR <= target; no interpolation."""
    ok = curve.fpr <= fpr_target
    return float(curve.tpr[ok].max())


def mse(x: torch.Tensor, x_star: torch.Tensor) -> float:
    return float(((x.double() - x_star.double()) ** 2).mean())


def psnr_from_mse(m: float, cap: float = 100.0) -> float:
    if m < 1e-10:
        return cap
    return min(cap, 10.0 * math.log10(1.0 / m))


def _gaussian_window(size: int = 11, sigma: float = 1.5, dtype=torch.float64):
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-coords ** 2 / (2 * sigma ** 2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim(x: torch.Tensor, y: torch.Tensor, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean SSIM over valid window positions, channels and batch (NCHW inputs).

    Images smaller than the window use a window clipped to the image size.
    """
    if x.shape != y.shape:
        raise MetricError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    x = x.double()
    y = y.double()
    if x.ndim == 3:
        x, y = x[None], y[None]
    n, c, h, w = x.shape
    size = min(window, h, w)
    win = _gaussian_window(size, sigma).to(x)
    win = win.expand(c, 1, size, size)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2

    def filt(z):
        return F.conv2d(z, win, groups=c)

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x ** 2
    syy = filt(y * y) - mu_y ** 2
    sxy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return float((num / den).mean())


def reconstruction_metrics(x: torch.Tensor, x_star: torch.Tensor) -> dict[str, float]:
    if x.shape != x_star.shape:
        raise MetricError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_star.shape)}")
    m = mse(x, x_star)
    return {"mse": m, "psnr": psnr_from_mse(m), "ssim": ssim(x, x_star)}


# Named perceptual metrics (e.g. LPIPS) can be registered here; none ship by default
# because they depend on pretrained network weights.
IMAGE_METRICS: dict[str, Callable[[torch.Tensor, torch.Tensor], float]] = {}


def register_image_metric(name: str, fn: Callable[[torch.Tensor, torch.Tensor], float]) -> None:
    IMAGE_METRICS[name] = fn


def extra_image_metrics(x, x_star) -> dict[str, float]:
    return {name: float(fn(x, x_star)) for name, fn in IMAGE_METRICS.items()}


def attack_accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions).ravel()
    labels = np.asarray(labels).ravel()
    if len(labels) == 0:
        raise MetricError("empty input")
    return float((predictions == labels).mean())


def macro_f1(predictions, labels, classes=None, return_absent: bool = False):
    """Unweighted mean of per-class F1.

    Classes that never occur in ``labels`` (but are predicted or listed in
    ``classes``) score F1 = 0 and are reported when ``return_absent`` is set.
    """
    predictions = np.asarray(predictions).ravel()
    labels = np.asarray(labels).ravel()
    if len(labels) == 0:
        raise MetricError("empty input")
    if classes is None:
        classes = np.union1d(np.unique(labels), np.unique(predictions))
    scores, absent = [], []
    for c in classes:
        tp = np.sum((predictions == c) & (labels == c))
        fp = np.sum((predictions == c) & (labels != c))
        fn = np.sum((predictions != c) & (labels == c))
        if not np.any(labels == c):
            absent.append(c)
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    value = float(np.mean(scores))
    return (value, absent) if return_absent else value


@dataclass
class PairedHistogram:
    edges: np.ndarray
    member: np.ndarray
    nonmember: np.ndarray

    def overlap(self) -> int:
        return int(np.minimum(self.member, self.nonmember).sum())

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_left", "bin_right", "member", "nonmember"])
            for i in range(len(self.member)):
                w.writerow([self.edges[i], self.edges[i + 1], int(self.member[i]),
                            int(self.nonmember[i])])


def loss_histogram(losses_member, losses_nonmember, bins: int = 50) -> PairedHistogram:
    if bins < 1:
        raise MetricError("bins must be >= 1")
    a = np.asarray(losses_member, dtype=np.float64).ravel()
    b = np.asarray(losses_nonmember, dtype=np.float64).ravel()
    edges = np.histogram_bin_edges(np.r_[a, b], bins=bins)
    return PairedHistogram(edges, np.histogram(a, edges)[0], np.histogram(b, edges)[0])
