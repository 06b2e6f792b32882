"""ROI proposal stage: baseline blob detector, matching and average precision.

Any external detector plugs in by writing the detections CSV format
(``image,x,y,w,h,score``) read by :func:`read_detections`.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from scipy import ndimage

from .boxes import BoundingBox, Detection, box_iou
from .errors import ContractViolation, DegenerateInputError
from .preprocess import extract_lung_region, intensity_histogram, otsu_threshold

DETECTIONS_HEADER = ["image", "x", "y", "w", "h", "score"]
_FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class ExternalDetectorConfig:
    """Tuned two-stage detector hyperparameters, recorded for an external integration."""

    backbone: str = "resnet50"
    learning_rate: float = 0.001
    step_size: int = 70000
    gamma: float = 0.1
    dropout: float = 0.5
    batch_size: int = 64

    def __post_init__(self):
        for name in ("learning_rate", "step_size", "gamma", "dropout", "batch_size"):
            if not getattr(self, name) > 0:
                raise ContractViolation(f"{name} must be positive")


def propose_rois_baseline(image, min_area_px: int = 10, max_count: int = 5,
                          quantile: float = 0.95) -> list[Detection]:
    """Bright-blob proposals inside the extracted lung region.

    The binarisation level is the Otsu threshold of the brightest
    ``1 - quantile`` fraction of lung-region pixels; 4-connected components of
    at least ``min_area_px`` pixels become boxes scored by mean intensity/255.
    """
    img = np.asarray(image)
    lung = extract_lung_region(img)
    region = lung.image[lung.mask]
    if region.size == 0:
        return []
    tail = region[region >= np.quantile(region, quantile)]
    try:
        level = otsu_threshold(intensity_histogram(tail))
    except DegenerateInputError:
        return []
    labels, n = ndimage.label(lung.image >= level, structure=_FOUR_CONNECTED)
    if n == 0:
        return []
    index = np.arange(1, n + 1)
    areas = ndimage.sum_labels(np.ones_like(labels), labels, index)
    means = ndimage.mean(lung.image.astype(np.float64), labels, index)
    slices = ndimage.find_objects(labels)
    found = []
    for k, (area, mean, sl) in enumerate(zip(areas, means, slices)):
        if area < min_area_px:
            continue
        ys, xs = sl
        box = BoundingBox(xs.start, ys.start, xs.stop - xs.start, ys.stop - ys.start)
        found.append((float(mean) / 255.0, k, box))
    found.sort(key=lambda item: (-item[0], item[1]))
    return [Detection(box, min(1.0, score)) for score, _, box in found[:max_count]]


def match_detections(preds: list[Detection], gts: list[BoundingBox],
                     iou_min: float = 0.5) -> list[bool]:
    """Greedy matching in descending score order; returns TP flags in input order.

    Each prediction takes the highest-IoU ground truth not yet matched.
    """
    if not 0.0 < iou_min <= 1.0:
        raise ContractViolation(f"iou_min must lie in (0, 1], got {iou_min}")
    order = sorted(range(len(preds)), key=lambda i: -preds[i].score)
    taken = [False] * len(gts)
    flags = [False] * len(preds)
    for i in order:
        best, best_iou = -1, iou_min
        for j, gt in enumerate(gts):
            if taken[j]:
                continue
            iou = box_iou(preds[i].box, gt)
            if iou >= best_iou and (best < 0 or iou > best_iou):
                best, best_iou = j, iou
        if best >= 0:
            taken[best] = True
            flags[i] = True
    return flags


def _interpolated_ap(scores: np.ndarray, flags: np.ndarray, n_gt: int) -> float:
    order = np.argsort(-scores, kind="mergesort")
    s, f = scores[order], flags[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1] if s.size else np.array([], dtype=int)
    tp = np.cumsum(f)[last].astype(np.float64)
    recall = np.r_[0.0, tp / n_gt]
    precision = np.r_[1.0, tp / (last + 1)]
    # precision envelope, right to left
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    return float(np.sum(np.diff(recall) * envelope[1:]))


def average_precision(preds, gts, iou_min: float = 0.5) -> float:
    """All-point interpolated AP for one image or for a mapping image -> (preds, gts)."""
    if isinstance(preds, Mapping):
        return dataset_average_precision(preds, gts, iou_min)
    if len(gts) == 0:
        raise ContractViolation("average precision is undefined without ground-truth boxes")
    flags = np.array(match_detections(preds, gts, iou_min), dtype=bool)
    scores = np.array([p.score for p in preds], dtype=np.float64)
    return _interpolated_ap(scores, flags, len(gts))


def dataset_average_precision(preds: Mapping[str, list[Detection]],
                              gts: Mapping[str, list[BoundingBox]], iou_min: float = 0.5) -> float:
    """AP pooled over images: matching per image, one global score sweep."""
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        raise ContractViolation("average precision is undefined without ground-truth boxes")
    scores, flags = [], []
    for image, dets in preds.items():
        flags.extend(match_detections(dets, list(gts.get(image, [])), iou_min))
        scores.extend(d.score for d in dets)
    return _interpolated_ap(np.array(scores, dtype=np.float64), np.array(flags, dtype=bool), n_gt)


# ------------------------------------------------------------------ CSV

def write_detections(path: str | Path, detections: Mapping[str, Iterable[Detection]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(DETECTIONS_HEADER)
        for image, dets in detections.items():
            for d in dets:
                b = d.box
                writer.writerow([image, b.x, b.y, b.w, b.h, repr(float(d.score))])


def read_detections(path: str | Path) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != DETECTIONS_HEADER:
            raise ContractViolation(f"{path}: header must be {','.join(DETECTIONS_HEADER)}")
        for row in reader:
            box = BoundingBox(*(float(row[k]) for k in "xywh"))
            out.setdefault(row["image"], []).append(Detection(box, float(row["score"])))
    return out
