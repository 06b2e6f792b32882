from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box; ``(x, y)`` is the top-left pixel, ``w``/``h`` the extent."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ContractViolation(f"box extent must be positive, got w={self.w}, h={self.h}")

    @property
    def x1(self) -> float:
        return self.x + self.w

    @property
    def y1(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def diameter(self) -> float:
        """Equivalent diameter, the geometric mean of the two extents."""
        return float(np.sqrt(self.w * self.h))

    @classmethod
    def from_mask(cls, mask) -> "BoundingBox":
        ys, xs = np.nonzero(np.asarray(mask))
        if ys.size == 0:
            raise ContractViolation("cannot fit a box to an empty mask")
        x0, y0 = int(xs.min()), int(ys.min())
        return cls(x0, y0, int(xs.max()) - x0 + 1, int(ys.max()) - y0 + 1)


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ContractViolation(f"detection score must lie in [0, 1], got {self.score}")


def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x1, b.x1) - max(a.x, b.x)
    ih = min(a.y1, b.y1) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)
