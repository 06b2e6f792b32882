"""Slice pre-processing, ROI cropping and augmentation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .boxes import BoundingBox
from .errors import ContractViolation, DegenerateInputError

log = logging.getLogger(__name__)

SLICE_SIZE = 512


def otsu_threshold(histogram) -> int:
    """Level ``t`` in 1..255 maximising between-class variance of ``[0, t)`` vs ``[t, 256)``.

    The criterion is evaluated in exact integer arithmetic, so ties resolve to
    the lowest level deterministically.
    """
    hist = np.asarray(histogram)
    if hist.shape != (256,):
        raise ContractViolation(f"histogram must have 256 bins, got shape {hist.shape}")
    if hist.dtype.kind not in "iub" or (hist < 0).any():
        raise ContractViolation("histogram must hold non-negative integer counts")
    counts = [int(v) for v in hist]
    total = sum(counts)
    if total <= 0:
        raise ContractViolation("histogram is empty")
    total_sum = sum(level * n for level, n in enumerate(counts))

    best_t, best_num, best_den = None, 0, 1
    n0 = s0 = 0
    for t in range(1, 256):
        n0 += counts[t - 1]
        s0 += (t - 1) * counts[t - 1]
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            continue
        # sigma_b^2 * total^2 == (n1*s0 - n0*s1)^2 / (n0*n1)
        num = (n1 * s0 - n0 * (total_sum - s0)) ** 2
        den = n0 * n1
        if best_t is None or num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    if best_t is None or best_num == 0:
        raise DegenerateInputError("degenerate histogram: all mass in a single intensity bin")
    return best_t


def intensity_histogram(pixels) -> np.ndarray:
    values = np.clip(np.rint(np.asarray(pixels, dtype=np.float64)), 0, 255).astype(np.int64)
    return np.bincount(values.ravel(), minlength=256)


class LungExtraction(NamedTuple):
    image: np.ndarray
    mask: np.ndarray
    warning: str | None


def extract_lung_region(image, structure_size: int = 5, iterations: int = 3) -> LungExtraction:
    """Keep pixels at or above the Otsu level, dilated, and zero the rest.

    A degenerate (single-level) slice passes through unchanged with a warning.
    """
    img = np.asarray(image)
    if img.shape != (SLICE_SIZE, SLICE_SIZE):
        raise ContractViolation(f"slice must be {SLICE_SIZE}x{SLICE_SIZE}, got {img.shape}")
    try:
        t = otsu_threshold(intensity_histogram(img))
    except DegenerateInputError as exc:
        log.warning("lung extraction skipped: %s", exc)
        return LungExtraction(img.copy(), np.ones(img.shape, dtype=bool), str(exc))
    mask = img >= t
    structure = np.ones((structure_size, structure_size), dtype=bool)
    mask = ndimage.binary_dilation(mask, structure=structure, iterations=iterations)
    return LungExtraction(np.where(mask, img, 0).astype(img.dtype), mask, None)


# ------------------------------------------------------------------ ROI

@dataclass(frozen=True)
class CropWindow:
    """Integer pixel window ``[x0, x1) x [y0, y1)`` inside the slice."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.y1 - self.y0, self.x1 - self.x0


def roi_window(box: BoundingBox, image_shape, pad_fraction: float = 0.10) -> CropWindow:
    h, w = image_shape[:2]
    px, py = pad_fraction * box.w, pad_fraction * box.h
    x0 = max(0, math.floor(box.x - px))
    y0 = max(0, math.floor(box.y - py))
    x1 = min(w, math.ceil(box.x1 + px))
    y1 = min(h, math.ceil(box.y1 + py))
    if x1 <= x0 or y1 <= y0:
        raise ContractViolation(f"box {box} does not intersect the {h}x{w} image")
    return CropWindow(x0, y0, x1, y1)


def resize_bilinear(arr: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Half-pixel-centred bilinear resize of a 2-D array (float64 result)."""
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float64))[None, None]
    out = F.interpolate(t, size=tuple(shape), mode="bilinear", align_corners=False)
    return out[0, 0].numpy()


class RoiCrop(NamedTuple):
    patch: np.ndarray  # (1, size, size) float in [0, 1]
    window: CropWindow


def crop_resize_roi(image, box: BoundingBox, pad_fraction: float = 0.10,
                    size: int = 224) -> RoiCrop:
    img = np.asarray(image)
    win = roi_window(box, img.shape, pad_fraction)
    crop = img[win.y0:win.y1, win.x0:win.x1].astype(np.float64) / 255.0
    patch = np.clip(resize_bilinear(crop, (size, size)), 0.0, 1.0)
    return RoiCrop(patch[None], win)


def crop_resize_mask(mask, window: CropWindow, size: int) -> np.ndarray:
    crop = np.asarray(mask)[window.y0:window.y1, window.x0:window.x1] > 0
    return (resize_bilinear(crop.astype(np.float64), (size, size)) >= 0.5).astype(np.uint8)


# --------------------------------------------------------- augmentation

@dataclass(frozen=True)
class AugmentationSpec:
    rotation_degrees: float = 15.0
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    elastic_alpha: float = 34.0
    elastic_sigma: float = 4.0
    seed: int = 0

    def __post_init__(self):
        for name in ("hflip_prob", "vflip_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ContractViolation(f"{name} must lie in [0, 1]")
        if self.elastic_sigma <= 0:
            raise ContractViolation("elastic_sigma must be > 0")
        if self.rotation_degrees < 0 or self.elastic_alpha < 0:
            raise ContractViolation("rotation_degrees and elastic_alpha must be >= 0")

    @classmethod
    def disabled(cls, seed: int = 0) -> "AugmentationSpec":
        return cls(rotation_degrees=0.0, hflip_prob=0.0, vflip_prob=0.0, elastic_alpha=0.0, seed=seed)


def rotate(image: np.ndarray, mask: np.ndarray, degrees: float) -> tuple[np.ndarray, np.ndarray]:
    """Counter-clockwise rotation about the centre, keeping the array shape."""
    quarter = degrees / 90.0
    if quarter == round(quarter) and image.shape[-1] == image.shape[-2]:
        k = int(round(quarter)) % 4
        return (np.rot90(image, k, axes=(-2, -1)).copy(),
                np.rot90(mask, k, axes=(-2, -1)).copy())
    axes = (image.ndim - 1, image.ndim - 2)
    img = ndimage.rotate(image, degrees, axes=axes, reshape=False, order=1, mode="nearest")
    msk = ndimage.rotate(mask, degrees, axes=(mask.ndim - 1, mask.ndim - 2), reshape=False,
                         order=0, mode="constant", cval=0)
    return img, msk


def elastic_transform(image, mask, alpha: float, sigma: float, seed: int):
    """Simard-style warp: unit uniform noise, Gaussian-smoothed, scaled by alpha.

    Works on the last two axes; the mask is resampled with nearest neighbour.
    """
    if sigma <= 0:
        raise ContractViolation("sigma must be > 0")
    image = np.asarray(image)
    mask = np.asarray(mask)
    if alpha == 0:
        return image.copy(), mask.copy()
    h, w = image.shape[-2:]
    rng = np.random.default_rng(seed)
    dy = ndimage.gaussian_filter(rng.uniform(-1, 1, (h, w)), sigma, mode="constant") * alpha
    dx = ndimage.gaussian_filter(rng.uniform(-1, 1, (h, w)), sigma, mode="constant") * alpha
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    coords = np.stack([yy + dy, xx + dx])

    def warp(arr, order):
        flat = arr.reshape(-1, h, w)
        out = [ndimage.map_coordinates(a, coords, order=order, mode="reflect") for a in flat]
        return np.stack(out).reshape(arr.shape)

    return warp(image, 1), warp(mask, 0)


def augment(image, mask, spec: AugmentationSpec, draw_seed: int):
    """Apply one random draw of rotation, flips and elastic warp to both arrays."""
    image = np.asarray(image)
    mask = np.asarray(mask)
    if image.shape[-2:] != mask.shape[-2:]:
        raise ContractViolation(f"image {image.shape} and mask {mask.shape} are not aligned")
    rng = np.random.default_rng([spec.seed, draw_seed])
    angle = rng.uniform(-spec.rotation_degrees, spec.rotation_degrees)
    hflip = rng.random() < spec.hflip_prob
    vflip = rng.random() < spec.vflip_prob
    warp_seed = int(rng.integers(2**31))
    if spec.rotation_degrees > 0 and angle != 0:
        image, mask = rotate(image, mask, angle)
    if hflip:
        image, mask = image[..., ::-1], mask[..., ::-1]
    if vflip:
        image, mask = image[..., ::-1, :], mask[..., ::-1, :]
    image, mask = np.ascontiguousarray(image), np.ascontiguousarray(mask)
    if spec.elastic_alpha > 0:
        image, mask = elastic_transform(image, mask, spec.elastic_alpha, spec.elastic_sigma, warp_seed)
    return image, mask
