"""Reference-image preprocessing geometry.

Covers orientation alignment of elongated instances against their target
area, the aspect-preserving pad-then-resize to 224x224, and the eight
lossless square symmetries used as the affine augmentation family.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
from PIL import Image

from ctxforge.core import PlacementSpec, ReferenceInstance
from ctxforge.errors import DataError
from ctxforge.seeding import rng_for

REFERENCE_SIDE = 224
PAD_FILL_RGB = 128  # mid-gray keeps pad borders free of spurious edges


class AffineOp(enum.Enum):
    """Dihedral symmetries of the square: lossless on rasters and masks."""

    IDENTITY = "identity"
    ROT90 = "rot90"
    ROT180 = "rot180"
    ROT270 = "rot270"
    FLIP_H = "flip_h"
    FLIP_V = "flip_v"
    TRANSPOSE = "transpose"
    ANTI_TRANSPOSE = "anti_transpose"

    @property
    def inverse(self) -> "AffineOp":
        if self is AffineOp.ROT90:
            return AffineOp.ROT270
        if self is AffineOp.ROT270:
            return AffineOp.ROT90
        return self  # identity, rot180, flips and transposes are involutions

    @property
    def swaps_axes(self) -> bool:
        return self in (
            AffineOp.ROT90,
            AffineOp.ROT270,
            AffineOp.TRANSPOSE,
            AffineOp.ANTI_TRANSPOSE,
        )

    def apply(self, raster: np.ndarray) -> np.ndarray:
        """Apply to a (H, W) or (H, W, C) array. Always returns a copy."""
        if self is AffineOp.IDENTITY:
            return raster.copy()
        if self is AffineOp.ROT90:
            out = np.rot90(raster, 1)
        elif self is AffineOp.ROT180:
            out = np.rot90(raster, 2)
        elif self is AffineOp.ROT270:
            out = np.rot90(raster, 3)
        elif self is AffineOp.FLIP_H:
            out = raster[:, ::-1]
        elif self is AffineOp.FLIP_V:
            out = raster[::-1, :]
        elif self is AffineOp.TRANSPOSE:
            out = np.swapaxes(raster, 0, 1)
        else:  # ANTI_TRANSPOSE
            out = np.swapaxes(raster, 0, 1)[::-1, ::-1]
        return np.ascontiguousarray(out)


@dataclass(frozen=True)
class ResizeRecord:
    """Bookkeeping for pad-then-resize, mapping output coords back to source.

    Padding is applied only on the shorter axis (symmetric split, odd extra
    pixel to the right/bottom); after padding the raster is square and
    `scale = output_side / padded_side`.
    """

    pad_left: int
    pad_right: int
    pad_top: int
    pad_bottom: int
    scale: float
    output_side: int = REFERENCE_SIDE

    def to_source(self, x_out: float, y_out: float) -> Tuple[float, float]:
        """Map an output coordinate back to source (pre-pad) coordinates."""
        x_pad = (x_out + 0.5) / self.scale - 0.5
        y_pad = (y_out + 0.5) / self.scale - 0.5
        return x_pad - self.pad_left, y_pad - self.pad_top

    def to_output(self, x_src: float, y_src: float) -> Tuple[float, float]:
        """Map a source coordinate into the resized output frame."""
        x_out = (x_src + self.pad_left + 0.5) * self.scale - 0.5
        y_out = (y_src + self.pad_top + 0.5) * self.scale - 0.5
        return x_out, y_out


def resize_pixels(pixels: np.ndarray, width: int, height: int) -> np.ndarray:
    """Bilinear resize of a uint8 RGB raster to width x height."""
    if pixels.shape[0] == height and pixels.shape[1] == width:
        return pixels.copy()
    img = Image.fromarray(pixels)
    return np.asarray(img.resize((width, height), Image.BILINEAR))


def resize_mask(mask: np.ndarray, width: int, height: int) -> np.ndarray:
    """Nearest-neighbor resize of a boolean mask; stays binary."""
    if mask.shape[0] == height and mask.shape[1] == width:
        return mask.copy()
    img = Image.fromarray(mask.astype(np.uint8) * 255)
    return np.asarray(img.resize((width, height), Image.NEAREST)) > 127


def resize_float(values: np.ndarray, width: int, height: int) -> np.ndarray:
    """Bilinear resize of a single-channel float raster (returns float32)."""
    arr = values.astype(np.float32)
    if arr.shape[0] == height and arr.shape[1] == width:
        return arr
    img = Image.fromarray(arr)
    return np.asarray(img.resize((width, height), Image.BILINEAR))


def align_ratio(r_r: float, r_t: float) -> Tuple[float, bool]:
    """Orientation-alignment decision on aspect ratios alone.

    Returns the post-alignment reference ratio and whether a 90-degree
    rotation is required, i.e. whether (R_r - 1)(R_t - 1) < 0 (the
    reference's elongation disagrees with the target's).
    """
    if (r_r - 1.0) * (r_t - 1.0) < 0.0:
        return 1.0 / r_r, True
    return r_r, False


def orient_align(
    ref: ReferenceInstance, placement: PlacementSpec
) -> Tuple[ReferenceInstance, bool]:
    """Rotate the reference 90 degrees iff its long edge disagrees with the target's.

    Post-state satisfies (R_r' - 1)(R_t - 1) >= 0; applying the operation
    twice equals applying it once.
    """
    _, rotate = align_ratio(ref.aspect_ratio, placement.aspect_ratio)
    if not rotate:
        return ref, False
    return apply_affine(AffineOp.ROT90, ref), True


def apply_affine(op: AffineOp, ref: ReferenceInstance) -> ReferenceInstance:
    """Transform pixels and mask identically; lossless for all eight ops."""
    return ReferenceInstance(
        pixels=op.apply(ref.pixels),
        mask=op.apply(ref.mask),
        label=ref.label,
        source=ref.source,
    )


def sample_affine(
    rng_seed: int, family: Sequence[AffineOp] | None = None
) -> AffineOp:
    """Deterministic uniform draw from the affine family (same seed, same op)."""
    ops = list(AffineOp) if family is None else list(family)
    if not ops:
        raise DataError("affine family must be non-empty")
    rng = rng_for(rng_seed, "affine")
    return ops[int(rng.integers(0, len(ops)))]


def pad_then_resize(ref: ReferenceInstance) -> Tuple[ReferenceInstance, ResizeRecord]:
    """Pad the shorter axis to square, then resize to 224x224.

    Pixels are padded with mid-gray and resampled bilinearly; the mask is
    padded with zeros and resampled nearest-neighbor so it stays binary.
    The returned record maps any output coordinate back to the source.
    """
    h, w = ref.pixels.shape[:2]
    side = max(h, w)
    pad_w = side - w
    pad_h = side - h
    pad_left, pad_right = pad_w // 2, pad_w - pad_w // 2
    pad_top, pad_bottom = pad_h // 2, pad_h - pad_h // 2

    pixels = np.pad(
        ref.pixels,
        ((pad_top, pad_bottom), (pad_left, pad_right), (0, 0)),
        constant_values=PAD_FILL_RGB,
    )
    mask = np.pad(
        ref.mask, ((pad_top, pad_bottom), (pad_left, pad_right)), constant_values=False
    )

    scale = REFERENCE_SIDE / side
    record = ResizeRecord(pad_left, pad_right, pad_top, pad_bottom, scale)
    out = ReferenceInstance(
        pixels=resize_pixels(pixels, REFERENCE_SIDE, REFERENCE_SIDE),
        mask=resize_mask(mask, REFERENCE_SIDE, REFERENCE_SIDE),
        label=ref.label,
        source=ref.source,
    )
    return out, record
