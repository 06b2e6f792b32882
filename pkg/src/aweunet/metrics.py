"""Segmentation losses and evaluation metrics.

Losses operate on torch tensors (they are differentiated during training);
metrics operate on numpy arrays.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch

from .errors import ContractViolation, DegenerateInputError

PROB_CLAMP = 1e-7
IOU_EPS = 1e-6


def _check_same_shape(a, b) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ContractViolation(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


# ---------------------------------------------------------------- losses

def bce_loss(prob: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _check_same_shape(prob, target)
    p = prob.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    t = target.to(p.dtype)
    return -(t * torch.log(p) + (1.0 - t) * torch.log1p(-p)).mean()


def iou_loss(prob: torch.Tensor, target: torch.Tensor, eps: float = IOU_EPS) -> torch.Tensor:
    """Soft-IoU loss ``1 - (sum pt + eps) / (sum p + sum t - sum pt + eps)``."""
    _check_same_shape(prob, target)
    t = target.to(prob.dtype)
    inter = (prob * t).sum()
    union = prob.sum() + t.sum() - inter
    return 1.0 - (inter + eps) / (union + eps)


def combined_loss(prob: torch.Tensor, target: torch.Tensor,
                  weights: tuple[float, float] = (1.0, 1.0)) -> torch.Tensor:
    w_bce, w_iou = weights
    return w_bce * bce_loss(prob, target) + w_iou * iou_loss(prob, target)


# --------------------------------------------------------------- metrics

@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)


def _as_binary(mask, name: str) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.dtype == bool:
        return arr
    if not np.isin(arr, (0, 1)).all():
        raise ContractViolation(f"{name} mask is not binary (values must be 0/1)")
    return arr.astype(bool)


def confusion_counts(pred, gt) -> ConfusionCounts:
    p = _as_binary(pred, "pred")
    g = _as_binary(gt, "gt")
    _check_same_shape(p, g)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp=tp, fp=fp, tn=int(p.size) - tp - fp - fn, fn=fn)


def _rate(num: int, den: int, absent: bool) -> float:
    if den == 0:
        return 1.0 if absent else 0.0
    return num / den


def pixel_metrics(c: ConfusionCounts) -> tuple[float, float, float]:
    """(accuracy, sensitivity, specificity).

    A rate whose denominator is zero is 1.0 when its class is absent from both
    masks and 0.0 otherwise.
    """
    if c.total <= 0:
        raise ContractViolation("confusion counts are empty")
    acc = (c.tp + c.tn) / c.total
    sen = _rate(c.tp, c.tp + c.fn, absent=c.tp + c.fn + c.fp == 0)
    spe = _rate(c.tn, c.tn + c.fp, absent=c.tn + c.fp + c.fn == 0)
    return acc, sen, spe


def overlap_from_counts(c: ConfusionCounts) -> tuple[float, float]:
    union = c.tp + c.fp + c.fn
    if union == 0:
        return 1.0, 1.0
    return 2 * c.tp / (2 * c.tp + c.fp + c.fn), c.tp / union


def overlap_metrics(pred, gt) -> tuple[float, float]:
    """(Dice, IoU); two empty masks score (1, 1)."""
    return overlap_from_counts(confusion_counts(pred, gt))


class Curve(NamedTuple):
    thresholds: np.ndarray
    x: np.ndarray
    y: np.ndarray

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["threshold", "x", "y"])
            for row in zip(self.thresholds, self.x, self.y):
                writer.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path: str | Path) -> "Curve":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, 0], data[:, 1], data[:, 2])


def _sweep(scores, gt):
    """Cumulative TP/FP counts at each distinct score, highest score first."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    g = _as_binary(gt, "gt").ravel()
    if s.shape != g.shape:
        raise ContractViolation(f"shape mismatch: {s.shape} vs {g.shape}")
    order = np.argsort(-s, kind="mergesort")
    s, g = s[order], g[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tps = np.cumsum(g)[last]
    fps = (last + 1) - tps
    return s[last], tps.astype(np.float64), fps.astype(np.float64), int(g.sum()), int(g.size - g.sum())


def roc_curve(scores, gt) -> tuple[Curve, float]:
    """ROC points (FPR, TPR) at every distinct score plus the trapezoidal AUC."""
    thr, tps, fps, pos, neg = _sweep(scores, gt)
    if pos == 0:
        raise DegenerateInputError("ROC undefined: ground truth has no positive (nodule) pixels")
    if neg == 0:
        raise DegenerateInputError("ROC undefined: ground truth has no negative (background) pixels")
    fpr = np.r_[0.0, fps / neg]
    tpr = np.r_[0.0, tps / pos]
    thr = np.r_[np.inf, thr]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return Curve(thr, fpr, tpr), auc


def pr_curve(scores, gt) -> tuple[Curve, float]:
    """Precision/recall at every distinct score; all-point interpolated AP.

    AP is ``sum_k (R_k - R_{k-1}) * P_k`` over the descending-score sweep.
    """
    thr, tps, fps, pos, _ = _sweep(scores, gt)
    if pos == 0:
        raise DegenerateInputError("PR undefined: ground truth has no positive pixels")
    recall = tps / pos
    precision = tps / (tps + fps)
    ap = float(np.sum(np.diff(np.r_[0.0, recall]) * precision))
    return Curve(thr, recall, precision), ap


@dataclass
class MetricsReport:
    acc: float
    sen: float
    spe: float
    dsc: float
    iou: float
    auc_roc: float
    auc_pr: float

    def to_dict(self) -> dict:
        return asdict(self)


def segmentation_report(pred, gt, scores) -> MetricsReport:
    c = confusion_counts(pred, gt)
    acc, sen, spe = pixel_metrics(c)
    dsc, iou = overlap_from_counts(c)
    _, auc = roc_curve(scores, gt)
    _, ap = pr_curve(scores, gt)
    return MetricsReport(acc, sen, spe, dsc, iou, auc, ap)
