"""Dataset manifests and the on-disk layout.

Layout::

    root/images/<stem>.png   8-bit grayscale slice
    root/masks/<stem>.png    0/255 nodule mask
    root/manifest.csv        image,mask,x,y,w,h,split  (one row per box)
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .boxes import BoundingBox
from .errors import ContractViolation

SPLITS = ("train", "val", "test")
SPLIT_FRACTIONS = (0.70, 0.10, 0.20)
MANIFEST_HEADER = ["image", "mask", "x", "y", "w", "h", "split"]


@dataclass(frozen=True)
class Entry:
    image: str
    mask: str
    boxes: tuple[BoundingBox, ...] = ()
    split: str = ""


@dataclass
class DatasetManifest:
    entries: list[Entry]
    seed: int | None = None
    root: Path | None = field(default=None, compare=False)

    def __len__(self) -> int:
        return len(self.entries)

    def split(self, name: str) -> list[Entry]:
        if name not in SPLITS:
            raise ContractViolation(f"unknown split {name!r}; expected one of {SPLITS}")
        return [e for e in self.entries if e.split == name]

    def counts(self) -> dict[str, int]:
        return {s: len(self.split(s)) for s in SPLITS}

    def path(self, relative: str) -> Path:
        return (self.root or Path(".")) / relative


def split_dataset(entries, seed: int, root: Path | None = None) -> DatasetManifest:
    """Seeded shuffle followed by a 70/10/20 partition."""
    entries = list(entries)
    n = len(entries)
    if n < 10:
        raise ContractViolation(f"need at least 10 entries to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(SPLIT_FRACTIONS[0] * n))
    n_val = int(round(SPLIT_FRACTIONS[1] * n))
    labels = ["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val)
    assigned = [None] * n
    for label, idx in zip(labels, order):
        assigned[idx] = replace(entries[idx], split=label)
    return DatasetManifest(assigned, seed=seed, root=root)


def filter_by_diameter(manifest: DatasetManifest, min_diameter: float,
                       mm_per_pixel: float = 1.0) -> DatasetManifest:
    """Drop entries whose largest nodule is narrower than ``min_diameter``.

    ``min_diameter`` is in millimetres when ``mm_per_pixel`` is given, in
    pixels otherwise (the default scale is 1).
    """
    threshold_px = min_diameter / mm_per_pixel
    kept = [e for e in manifest.entries
            if e.boxes and max(b.diameter for b in e.boxes) >= threshold_px]
    return DatasetManifest(kept, seed=manifest.seed, root=manifest.root)


# ------------------------------------------------------------------ I/O

def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for e in manifest.entries:
            for b in e.boxes:
                writer.writerow([e.image, e.mask, _num(b.x), _num(b.y), _num(b.w), _num(b.h), e.split])
            if not e.boxes:
                writer.writerow([e.image, e.mask, "", "", "", "", e.split])


def _num(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def read_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    grouped: dict[tuple[str, str], dict] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_HEADER:
            raise ContractViolation(f"{path}: header must be {','.join(MANIFEST_HEADER)}")
        for row in reader:
            key = (row["image"], row["mask"])
            slot = grouped.setdefault(key, {"boxes": [], "split": row["split"]})
            if row["x"] != "":
                slot["boxes"].append(BoundingBox(*(float(row[k]) for k in "xywh")))
    entries = [Entry(img, msk, tuple(v["boxes"]), v["split"]) for (img, msk), v in grouped.items()]
    return DatasetManifest(entries, root=path.parent)


def load_dataset(root: str | Path) -> DatasetManifest:
    return read_manifest(Path(root) / "manifest.csv")


def read_gray(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


def write_gray(path: str | Path, arr: np.ndarray) -> None:
    Image.fromarray(np.asarray(arr, dtype=np.uint8), mode="L").save(path, format="PNG")


def read_mask(path: str | Path) -> np.ndarray:
    return (read_gray(path) > 127).astype(np.uint8)


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    write_gray(path, (np.asarray(mask) > 0).astype(np.uint8) * 255)
