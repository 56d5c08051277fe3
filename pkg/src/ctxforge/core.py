"""Shared domain types and geometry primitives.

Boxes use continuous sub-pixel coordinates with the half-open convention
[x_min, x_max) x [y_min, y_max), origin at the top-left of the image.
All types are immutable values and safe to share across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Tuple

import numpy as np

from ctxforge.errors import DataError

Split = Literal["base", "novel"]


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box, half-open, continuous pixel coordinates."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise DataError(f"box coordinates must be finite, got {coords}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise DataError(f"degenerate box: {coords}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


def iou(a: BBox, b: BBox) -> float:
    """Intersection-over-union of two boxes. Symmetric; 0 when disjoint."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def pixel_bounds(box: BBox) -> Tuple[int, int, int, int]:
    """Rasterize a box to integer pixel bounds (x0, y0, x1, y1), half-open.

    Exact for integer-valued boxes, which is what the synthesis pipeline
    produces; sub-pixel edges round to the nearest pixel border.
    """
    x0, y0 = int(round(box.x_min)), int(round(box.y_min))
    x1, y1 = int(round(box.x_max)), int(round(box.y_max))
    if x1 <= x0:
        x1 = x0 + 1
    if y1 <= y0:
        y1 = y0 + 1
    return x0, y0, x1, y1


@dataclass(frozen=True)
class ClassLabel:
    """A class name plus its base/novel split membership.

    The base/novel partition is a protocol-level contract: the two name
    sets must be disjoint, which dataset manifests enforce globally.
    """

    name: str
    split: Split = "base"

    def __post_init__(self) -> None:
        if self.split not in ("base", "novel"):
            raise DataError(f"split must be 'base' or 'novel', got {self.split!r}")
        if not self.name:
            raise DataError("class name must be non-empty")


def _tight_mask_box(mask: np.ndarray) -> Tuple[int, int, int, int]:
    """(x0, y0, x1, y1) half-open bounds of the set pixels of a mask."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise DataError("mask has no set pixels")
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


@dataclass(frozen=True)
class ReferenceInstance:
    """An object crop: pixels, tight binary mask, label, and provenance."""

    pixels: np.ndarray  # (H, W, 3) uint8 RGB
    mask: np.ndarray  # (H, W) bool
    label: ClassLabel
    source: Tuple[str, BBox]  # (image id, box in the source image)

    def __post_init__(self) -> None:
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise DataError(f"reference pixels must be (H, W, 3), got {self.pixels.shape}")
        if self.mask.shape != self.pixels.shape[:2]:
            raise DataError(
                f"mask shape {self.mask.shape} != pixel shape {self.pixels.shape[:2]}"
            )
        if self.pixels.shape[0] < 1 or self.pixels.shape[1] < 1:
            raise DataError("reference raster is empty")
        if not bool(self.mask.any()):
            raise DataError("reference mask has no set pixels")

    @property
    def aspect_ratio(self) -> float:
        """R_r: width/height of the tight mask bounding box."""
        x0, y0, x1, y1 = _tight_mask_box(self.mask)
        return (x1 - x0) / (y1 - y0)


@dataclass(frozen=True)
class ContextScene:
    """A background image with its ground-truth boxes.

    `novel_free` asserts the scene contains no novel-split instances;
    synthesis plans rely on it to keep synthetic ground truth clean.
    """

    pixels: np.ndarray  # (H, W, 3) uint8 RGB
    existing_boxes: Tuple[Tuple[BBox, ClassLabel], ...] = field(default_factory=tuple)
    novel_free: bool = False

    def __post_init__(self) -> None:
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise DataError(f"context pixels must be (H, W, 3), got {self.pixels.shape}")
        object.__setattr__(self, "existing_boxes", tuple(self.existing_boxes))
        if self.novel_free:
            for _, label in self.existing_boxes:
                if label.split == "novel":
                    raise DataError(
                        f"context flagged novel_free but contains novel class {label.name!r}"
                    )

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])


@dataclass(frozen=True)
class PlacementSpec:
    """A target rectangle inside a context scene."""

    target: BBox

    @property
    def aspect_ratio(self) -> float:
        """R_t: target width/height."""
        return self.target.width / self.target.height

    def check_inside(self, width: int, height: int) -> None:
        """Raise unless the target lies fully within a width x height frame."""
        t = self.target
        if t.x_min < 0 or t.y_min < 0 or t.x_max > width or t.y_max > height:
            raise DataError(
                f"placement {t.as_tuple()} exits context bounds {width}x{height}"
            )
