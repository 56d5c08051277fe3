"""Instance-into-scene compositing backends.

Three interchangeable backends produce a composited image plus the new
ground-truth box: naive copy-paste, discrete-Poisson seamless cloning,
and a remote diffusion-integration client. Naive and Poisson are pure
and deterministic; the solver works in float on a [0, 1] pixel scale and
clamps only after solving.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from ctxforge.core import (
    BBox,
    ContextScene,
    PlacementSpec,
    ReferenceInstance,
    pixel_bounds,
)
from ctxforge.errors import DataError, ProtocolError
from ctxforge.filtering import StitchCollage
from ctxforge.geometry import resize_mask, resize_pixels

log = logging.getLogger(__name__)

# Conditioning embedding of the reference image: rows x columns.
COARSE_FEATURE_SHAPE = (257, 1536)

DEFAULT_TOL = 1e-3


class Backend(str, enum.Enum):
    NAIVE = "naive"
    POISSON = "poisson"
    DIFFUSION = "diffusion"


@dataclass(frozen=True)
class SolverStats:
    iterations: int
    residual: float
    converged: bool


@dataclass(frozen=True)
class ConditioningBundle:
    """Everything the integration service needs for one placement."""

    context_pixels: np.ndarray  # (H, W, 3) uint8
    region_mask: np.ndarray  # (H, W) bool, True exactly on the placement rect
    stitch: StitchCollage
    reference_pixels: np.ndarray  # (H, W, 3) uint8, oriented reference crop
    coarse_feature: Optional[np.ndarray] = None  # (257, 1536) when present

    def __post_init__(self) -> None:
        h, w = self.context_pixels.shape[:2]
        if self.context_pixels.ndim != 3 or self.context_pixels.shape[2] != 3:
            raise DataError(f"context must be RGB, got {self.context_pixels.shape}")
        if self.region_mask.shape != (h, w):
            raise DataError(
                f"region mask {self.region_mask.shape} does not match context {(h, w)}"
            )
        if self.stitch.canvas.shape != (h, w):
            raise DataError(
                f"stitch canvas {self.stitch.canvas.shape} does not match context {(h, w)}"
            )
        expected = np.zeros((h, w), dtype=bool)
        x0, y0, x1, y1 = pixel_bounds(self.stitch.region.target)
        expected[y0:y1, x0:x1] = True
        if not np.array_equal(self.region_mask.astype(bool), expected):
            raise DataError("region mask must be set exactly on the placement rectangle")
        if self.reference_pixels.ndim != 3 or self.reference_pixels.shape[2] != 3:
            raise DataError(
                f"reference must be RGB, got {self.reference_pixels.shape}"
            )
        if self.coarse_feature is not None:
            shape = tuple(self.coarse_feature.shape)
            if shape != COARSE_FEATURE_SHAPE:
                raise DataError(
                    f"coarse_feature shape {shape} must be {COARSE_FEATURE_SHAPE}"
                )
            if not np.all(np.isfinite(self.coarse_feature)):
                raise DataError("coarse_feature contains non-finite values")


@dataclass(frozen=True)
class CompositeResult:
    pixels: np.ndarray  # (H, W, 3) uint8, context dimensions
    new_box: BBox
    backend: Backend
    solver_stats: Optional[SolverStats] = None


def make_bundle(
    context_pixels: np.ndarray,
    ref: ReferenceInstance,
    stitch: StitchCollage,
    coarse_feature: Optional[np.ndarray] = None,
) -> ConditioningBundle:
    """Build the service bundle for one placement from its parts."""
    h, w = context_pixels.shape[:2]
    region = np.zeros((h, w), dtype=bool)
    x0, y0, x1, y1 = pixel_bounds(stitch.region.target)
    region[y0:y1, x0:x1] = True
    return ConditioningBundle(
        context_pixels=context_pixels,
        region_mask=region,
        stitch=stitch,
        reference_pixels=ref.pixels,
        coarse_feature=coarse_feature,
    )


def _resized_parts(
    ref: ReferenceInstance, placement: PlacementSpec
) -> Tuple[np.ndarray, np.ndarray, Tuple[int, int, int, int]]:
    x0, y0, x1, y1 = pixel_bounds(placement.target)
    w, h = x1 - x0, y1 - y0
    if w < 1 or h < 1:
        raise DataError(f"placement rectangle degenerate after rounding: {w}x{h}")
    src = resize_pixels(ref.pixels, w, h)
    mask = resize_mask(ref.mask, w, h)
    return src, mask, (x0, y0, x1, y1)


def compose_naive(
    context: ContextScene, ref: ReferenceInstance, placement: PlacementSpec
) -> CompositeResult:
    """Overwrite the placement region with the resized reference where its
    mask is set; the context is untouched everywhere else."""
    h, w = context.pixels.shape[:2]
    placement.check_inside(w, h)
    src, mask, (x0, y0, x1, y1) = _resized_parts(ref, placement)
    out = context.pixels.copy()
    patch = out[y0:y1, x0:x1]
    out[y0:y1, x0:x1] = np.where(mask[..., None], src, patch)
    return CompositeResult(pixels=out, new_box=placement.target, backend=Backend.NAIVE)


def _neighbor_sum(u: np.ndarray) -> np.ndarray:
    out = np.zeros_like(u)
    out[1:, :] += u[:-1, :]
    out[:-1, :] += u[1:, :]
    out[:, 1:] += u[:, :-1]
    out[:, :-1] += u[:, 1:]
    return out


def poisson_residual(
    solution: np.ndarray,
    source: np.ndarray,
    boundary: np.ndarray,
    mask: np.ndarray,
) -> float:
    """Max-norm of the discrete Poisson defect of `solution` over `mask`.

    The equation at each masked pixel p is
    4 f_p - sum_q f_q = 4 g_p - sum_q g_q with f = boundary outside the mask.
    """
    f = np.where(mask, solution, boundary)
    lhs = 4.0 * f - _neighbor_sum(f)
    rhs = 4.0 * source - _neighbor_sum(source)
    defect = np.where(mask, lhs - rhs, 0.0)
    return float(np.abs(defect).max()) if mask.any() else 0.0


def solve_poisson(
    source: np.ndarray,
    boundary: np.ndarray,
    mask: np.ndarray,
    tol: float = DEFAULT_TOL,
    max_iter: Optional[int] = None,
) -> Tuple[np.ndarray, SolverStats]:
    """Solve the masked discrete Poisson system by conjugate gradient.

    `source` supplies the guidance Laplacian, `boundary` the Dirichlet
    values outside the mask; all three arrays share one 2-D shape. The
    mask must not touch the array border, so every unknown has four
    in-array neighbors. Returns boundary values outside the mask and the
    solved values inside; no clamping is applied here.
    """
    if source.shape != boundary.shape or source.shape != mask.shape:
        raise DataError(
            f"shape mismatch: source {source.shape}, boundary {boundary.shape}, "
            f"mask {mask.shape}"
        )
    mask = mask.astype(bool)
    if not mask.any():
        raise DataError("empty mask: nothing to solve")
    if mask[0, :].any() or mask[-1, :].any() or mask[:, 0].any() or mask[:, -1].any():
        raise DataError("mask touches the array border")
    g = source.astype(np.float64)
    bnd = boundary.astype(np.float64)

    n = int(mask.sum())
    if max_iter is None:
        max_iter = math.ceil(10.0 * math.sqrt(n))

    b = np.where(mask, 4.0 * g - _neighbor_sum(g) + _neighbor_sum(np.where(mask, 0.0, bnd)), 0.0)

    def apply_a(u: np.ndarray) -> np.ndarray:
        return np.where(mask, 4.0 * u - _neighbor_sum(u), 0.0)

    # Warm start from the source: exact for consistent systems.
    x = np.where(mask, g, 0.0)
    r = b - apply_a(x)
    iterations = 0
    if float(np.abs(r).max()) > tol:
        p = r.copy()
        rs = float((r * r).sum())
        for iterations in range(1, max_iter + 1):
            ap = apply_a(p)
            denom = float((p * ap).sum())
            if denom <= 0.0:
                break
            alpha = rs / denom
            x += alpha * p
            r -= alpha * ap
            if float(np.abs(r).max()) <= tol:
                break
            rs_new = float((r * r).sum())
            p = r + (rs_new / rs) * p
            rs = rs_new

    solution = np.where(mask, x, bnd)
    residual = poisson_residual(solution, g, bnd, mask)
    return solution, SolverStats(
        iterations=iterations, residual=residual, converged=residual <= tol
    )


def compose_poisson(
    context: ContextScene,
    ref: ReferenceInstance,
    placement: PlacementSpec,
    tol: float = DEFAULT_TOL,
    max_iter: Optional[int] = None,
) -> CompositeResult:
    """Seamless cloning: per RGB channel, solve the discrete Poisson system
    with the resized reference as guidance and the context as Dirichlet
    boundary; clamp to the valid pixel range after solving."""
    h, w = context.pixels.shape[:2]
    placement.check_inside(w, h)
    src, mask, (x0, y0, x1, y1) = _resized_parts(ref, placement)
    if not mask.any():
        raise DataError("instance mask empty after resampling to the placement")
    if (
        (y0 == 0 and mask[0, :].any())
        or (y1 == h and mask[-1, :].any())
        or (x0 == 0 and mask[:, 0].any())
        or (x1 == w and mask[:, -1].any())
    ):
        raise DataError("instance mask touches the context image border")

    # Window: placement grown by one pixel, clipped to the image. Guidance
    # values outside the placement replicate the nearest source pixel.
    wy0, wy1 = max(y0 - 1, 0), min(y1 + 1, h)
    wx0, wx1 = max(x0 - 1, 0), min(x1 + 1, w)
    ys = np.clip(np.arange(wy0, wy1) - y0, 0, src.shape[0] - 1)
    xs = np.clip(np.arange(wx0, wx1) - x0, 0, src.shape[1] - 1)
    g_win = src[np.ix_(ys, xs)].astype(np.float64) / 255.0
    bnd_win = context.pixels[wy0:wy1, wx0:wx1].astype(np.float64) / 255.0
    mask_win = np.zeros((wy1 - wy0, wx1 - wx0), dtype=bool)
    mask_win[y0 - wy0 : y1 - wy0, x0 - wx0 : x1 - wx0] = mask

    out = context.pixels.copy()
    total_iters = 0
    worst = 0.0
    converged = True
    for c in range(3):
        sol, stats = solve_poisson(
            g_win[..., c], bnd_win[..., c], mask_win, tol=tol, max_iter=max_iter
        )
        total_iters += stats.iterations
        worst = max(worst, stats.residual)
        converged = converged and stats.converged
        values = np.clip(np.rint(sol * 255.0), 0.0, 255.0).astype(np.uint8)
        patch = out[wy0:wy1, wx0:wx1, c]
        out[wy0:wy1, wx0:wx1, c] = np.where(mask_win, values, patch)

    stats = SolverStats(iterations=total_iters, residual=worst, converged=converged)
    if not converged:
        log.warning(
            "poisson solve not converged: residual %.3g after %d iterations",
            worst,
            total_iters,
        )
    return CompositeResult(
        pixels=out,
        new_box=placement.target,
        backend=Backend.POISSON,
        solver_stats=stats,
    )


def compose_diffusion(
    client,
    bundle: ConditioningBundle,
    placement: PlacementSpec,
    steps: int = 50,
    seed: int = 0,
) -> CompositeResult:
    """Send the bundle to the integration service and wrap its answer.

    Shape problems in the bundle are raised before anything goes on the
    wire; a response whose dimensions disagree with the context is a
    protocol error surfaced with both sizes.
    """
    if bundle.coarse_feature is not None:
        shape = tuple(bundle.coarse_feature.shape)
        if shape != COARSE_FEATURE_SHAPE:
            raise DataError(f"coarse_feature shape {shape} must be {COARSE_FEATURE_SHAPE}")
    expected = bundle.context_pixels.shape
    pixels = client.integrate(bundle, steps=steps, seed=seed)
    if pixels.shape != expected:
        raise ProtocolError(
            f"service returned image of shape {tuple(pixels.shape)}, "
            f"expected {tuple(expected)}"
        )
    return CompositeResult(
        pixels=pixels, new_box=placement.target, backend=Backend.DIFFUSION
    )
