"""High-frequency guidance maps and the stitched conditioning collage.

The fine-grained guidance for an instance is the Sobel gradient magnitude
of its grayscale crop, max-normalized per map. The collage places the
oriented, filtered, affine-augmented map into a context-sized zero canvas
at the placement rectangle, masked to the instance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
from PIL import Image

from ctxforge.core import PlacementSpec, ReferenceInstance, pixel_bounds
from ctxforge.errors import DataError
from ctxforge.geometry import (
    AffineOp,
    orient_align,
    resize_float,
    resize_mask,
    sample_affine,
)

# Sobel difference kernels; any 3x3 difference pair annihilates constants.
KERNEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
KERNEL_Y = KERNEL_X.T

_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class HighFreqMap:
    """Single-channel non-negative magnitudes in [0, 1], source-sized."""

    values: np.ndarray

    def __post_init__(self) -> None:
        if self.values.ndim != 2:
            raise DataError(f"high-frequency map must be 2-D, got {self.values.shape}")


@dataclass(frozen=True)
class StitchCollage:
    """Context-sized canvas carrying the guidance map at the placement region."""

    canvas: np.ndarray  # (H, W) float, zero outside region
    region: PlacementSpec

    def to_png_bytes(self) -> bytes:
        """8-bit grayscale PNG export (values x255, rounded)."""
        import io

        arr = np.rint(np.clip(self.canvas, 0.0, 1.0) * 255.0).astype(np.uint8)
        buf = io.BytesIO()
        Image.fromarray(arr).save(buf, format="PNG")
        return buf.getvalue()


def to_grayscale(pixels: np.ndarray) -> np.ndarray:
    """ITU-R 601 luma as float64."""
    return pixels.astype(np.float64) @ _LUMA


def gradient_magnitude(pixels: np.ndarray) -> np.ndarray:
    """Un-normalized per-pixel Sobel gradient magnitude of the grayscale image.

    Borders are handled by edge replication, so constant inputs map to
    exactly zero everywhere.
    """
    if pixels.shape[0] < 3 or pixels.shape[1] < 3:
        raise DataError(f"raster {pixels.shape[:2]} smaller than the 3x3 kernel")
    gray = to_grayscale(pixels) if pixels.ndim == 3 else pixels.astype(np.float64)
    p = np.pad(gray, 1, mode="edge")
    gx = (
        (p[:-2, 2:] + 2.0 * p[1:-1, 2:] + p[2:, 2:])
        - (p[:-2, :-2] + 2.0 * p[1:-1, :-2] + p[2:, :-2])
    )
    gy = (
        (p[2:, :-2] + 2.0 * p[2:, 1:-1] + p[2:, 2:])
        - (p[:-2, :-2] + 2.0 * p[:-2, 1:-1] + p[:-2, 2:])
    )
    return np.sqrt(gx * gx + gy * gy)


def high_pass(pixels: np.ndarray) -> HighFreqMap:
    """Max-normalized gradient magnitude; an all-zero map stays all-zero."""
    mag = gradient_magnitude(pixels)
    peak = float(mag.max())
    if peak > 0.0:
        mag = mag / peak
    return HighFreqMap(values=mag)


def build_stitch(
    ref: ReferenceInstance,
    placement: PlacementSpec,
    affine_seed: int,
    context_shape: Tuple[int, int],
    family: Sequence[AffineOp] | None = None,
) -> Tuple[StitchCollage, AffineOp]:
    """Assemble the conditioning collage: orient, filter, augment, place.

    Composition order is orientation alignment first, then high-pass
    filtering, then the sampled affine op; the result is scaled to the
    placement rectangle, masked to the (identically transformed) instance
    mask, and pasted into a zero canvas of `context_shape` (H, W).
    """
    ctx_h, ctx_w = context_shape
    placement.check_inside(ctx_w, ctx_h)

    aligned, _ = orient_align(ref, placement)
    hf = high_pass(aligned.pixels)
    op = sample_affine(affine_seed, family)
    values = op.apply(hf.values)
    mask = op.apply(aligned.mask)

    x0, y0, x1, y1 = pixel_bounds(placement.target)
    w, h = x1 - x0, y1 - y0
    values_r = resize_float(values, w, h).astype(np.float64)
    mask_r = resize_mask(mask, w, h)

    canvas = np.zeros((ctx_h, ctx_w), dtype=np.float64)
    canvas[y0:y1, x0:x1] = np.where(mask_r, values_r, 0.0)
    return StitchCollage(canvas=canvas, region=placement), op
