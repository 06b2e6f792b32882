"""Synthetic CT-like slices with exactly known nodule masks.

Each slice has a dim smooth-noise background, two elliptical lung fields at
a mid-gray level and one or more Gaussian-profile nodules inside the lungs.
A nodule of radius ``R`` has profile ``exp(-ln2 * r^2 / R^2)``, so its mask
(the 0.5 level set of the profile) is the disc of radius ``R``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .boxes import BoundingBox
from .dataset import DatasetManifest, Entry, write_gray, write_mask
from .errors import ContractViolation

BACKGROUND_LEVEL = 20.0
LUNG_LEVEL = 70.0
PIXEL_NOISE = 1.5


@dataclass(frozen=True)
class PhantomSpec:
    n_images: int = 20
    image_size: int = 512
    nodule_count_range: tuple[int, int] = (1, 1)
    nodule_radius_range: tuple[float, float] = (6.0, 12.0)
    nodule_contrast_range: tuple[float, float] = (40.0, 90.0)
    background_texture_scale: float = 16.0
    seed: int = 0

    def validate(self) -> None:
        lo, hi = self.nodule_count_range
        if not 1 <= lo <= hi:
            raise ContractViolation("nodule_count_range must satisfy 1 <= lo <= hi")
        r_lo, r_hi = self.nodule_radius_range
        if not 2 <= r_lo <= r_hi:
            raise ContractViolation("nodule radii must be >= 2 px and ordered")
        c_lo, c_hi = self.nodule_contrast_range
        if not 0 < c_lo <= c_hi or LUNG_LEVEL + c_hi > 255:
            raise ContractViolation("nodule contrast range must be positive, ordered and fit 8 bits")
        if self.n_images < 1 or self.image_size < 32:
            raise ContractViolation("need n_images >= 1 and image_size >= 32")
        if self.background_texture_scale <= 0:
            raise ContractViolation("background_texture_scale must be > 0")


class Phantom(NamedTuple):
    image: np.ndarray  # uint8
    mask: np.ndarray   # uint8 0/1
    boxes: list[BoundingBox]


def _smooth_noise(rng, shape, scale):
    field = ndimage.gaussian_filter(rng.standard_normal(shape), scale, mode="reflect")
    return field / (field.std() + 1e-12)


def render_phantom(spec: PhantomSpec, index: int) -> Phantom:
    spec.validate()
    rng = np.random.default_rng(spec.seed + index)
    n = spec.image_size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)

    image = BACKGROUND_LEVEL + 6.0 * _smooth_noise(rng, (n, n), spec.background_texture_scale)
    lungs = []
    for side in (0.3, 0.7):
        cx = n * (side + rng.uniform(-0.02, 0.02))
        cy = n * (0.5 + rng.uniform(-0.03, 0.03))
        ax = n * rng.uniform(0.14, 0.17)
        ay = n * rng.uniform(0.26, 0.32)
        lungs.append((cx, cy, ax, ay))
    lung_mask = np.zeros((n, n), dtype=bool)
    for cx, cy, ax, ay in lungs:
        lung_mask |= ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 <= 1.0
    lung_texture = 4.0 * _smooth_noise(rng, (n, n), spec.background_texture_scale)
    image = np.where(lung_mask, LUNG_LEVEL + lung_texture, image)

    count = int(rng.integers(spec.nodule_count_range[0], spec.nodule_count_range[1] + 1))
    placed: list[tuple[float, float, float]] = []
    for _ in range(count):
        radius = rng.uniform(*spec.nodule_radius_range)
        margin = 1.5 * radius
        hosts = [lung for lung in lungs if min(lung[2], lung[3]) > margin + 1]
        if not hosts:
            raise ContractViolation(f"nodule radius {radius:.1f} px does not fit inside a lung field")
        for _attempt in range(200):
            cx, cy, ax, ay = hosts[int(rng.integers(len(hosts)))]
            theta = rng.uniform(0, 2 * math.pi)
            rho = math.sqrt(rng.uniform(0, 1))
            px = cx + rho * (ax - margin) * math.cos(theta)
            py = cy + rho * (ay - margin) * math.sin(theta)
            if all(math.hypot(px - qx, py - qy) > 2.5 * (radius + qr) for qx, qy, qr in placed):
                placed.append((px, py, radius))
                break
        else:
            raise ContractViolation("could not place non-overlapping nodules; reduce count or radius")

    mask = np.zeros((n, n), dtype=bool)
    boxes = []
    for px, py, radius in placed:
        contrast = rng.uniform(*spec.nodule_contrast_range)
        profile = np.exp(-math.log(2.0) * ((xx - px) ** 2 + (yy - py) ** 2) / radius ** 2)
        image = image + contrast * profile
        own = profile >= 0.5
        mask |= own
        boxes.append(BoundingBox.from_mask(own))

    image = image + PIXEL_NOISE * rng.standard_normal((n, n))
    image = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    return Phantom(image, mask.astype(np.uint8), boxes)


def generate_phantoms(spec: PhantomSpec, root: str | Path) -> DatasetManifest:
    """Render ``spec.n_images`` slices into ``root/images`` and ``root/masks``.

    Entry ``i`` is seeded with ``spec.seed + i``, so any subset can be
    rendered independently.  Splits are left unassigned.
    """
    spec.validate()
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(spec.n_images):
        ph = render_phantom(spec, i)
        stem = f"phantom_{i:04d}.png"
        write_gray(root / "images" / stem, ph.image)
        write_mask(root / "masks" / stem, ph.mask)
        entries.append(Entry(f"images/{stem}", f"masks/{stem}", tuple(ph.boxes)))
    return DatasetManifest(entries, seed=spec.seed, root=root)
