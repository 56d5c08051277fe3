"""Synthesis orchestration: seeded placement sampling with overlap
rejection, backend compositing, and synthetic-manifest assembly.

A plan lists (context, class, count) items. Consecutive items sharing a
context form one synthetic image; listing a context again later in the
plan starts a new variant of it ("{context_id}__syn{n}" counts these
runs). Each run derives its own sub-seeds, so runs are independent and
the whole synthesis parallelizes across them without affecting results.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from ctxforge.compositing import (
    Backend,
    compose_diffusion,
    compose_naive,
    compose_poisson,
    make_bundle,
)
from ctxforge.core import (
    BBox,
    ClassLabel,
    ContextScene,
    PlacementSpec,
    ReferenceInstance,
    iou,
)
from ctxforge.errors import ConfigError, DataError
from ctxforge.filtering import build_stitch
from ctxforge.geometry import orient_align
from ctxforge.manifest import (
    Annotation,
    DatasetManifest,
    ImageRecord,
    extract_references,
    load_image,
)
from ctxforge.seeding import rng_for

log = logging.getLogger(__name__)

DEFAULT_SCALE_RANGE = (0.7, 1.3)
DEFAULT_OVERLAP = 0.1
DEFAULT_MAX_ATTEMPTS = 50


@dataclass(frozen=True)
class PlanItem:
    context_id: str
    class_name: str
    count: int = 1


@dataclass(frozen=True)
class SynthesisPlan:
    items: Tuple[PlanItem, ...]
    backend: Backend = Backend.NAIVE
    scale_range: Tuple[float, float] = DEFAULT_SCALE_RANGE
    overlap_threshold: float = DEFAULT_OVERLAP
    max_attempts: int = DEFAULT_MAX_ATTEMPTS
    seed: int = 0
    require_novel_free: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "backend", Backend(self.backend))
        if not self.items:
            raise DataError("plan has no items")
        for item in self.items:
            if item.count < 1:
                raise DataError(f"plan item {item}: count must be >= 1")
        if not (0.0 <= self.overlap_threshold < 1.0):
            raise DataError(
                f"overlap threshold {self.overlap_threshold} outside [0, 1)"
            )
        lo, hi = self.scale_range
        if not (0.0 < lo <= hi):
            raise DataError(f"bad scale range {self.scale_range}")
        if self.max_attempts < 1:
            raise DataError(f"max attempts must be >= 1, got {self.max_attempts}")

    @property
    def context_ids(self) -> Tuple[str, ...]:
        seen: Dict[str, None] = {}
        for item in self.items:
            seen.setdefault(item.context_id, None)
        return tuple(seen)


def build_plan(
    context_ids: Sequence[str],
    class_names: Sequence[str],
    per_context: int,
    backend: Backend = Backend.NAIVE,
    seed: int = 0,
    scale_range: Tuple[float, float] = DEFAULT_SCALE_RANGE,
    overlap_threshold: float = DEFAULT_OVERLAP,
    max_attempts: int = DEFAULT_MAX_ATTEMPTS,
    variants: int = 1,
) -> SynthesisPlan:
    """Uniform plan: `per_context` seeded class draws for every context,
    repeated `variants` times (each repeat becomes a fresh synthetic
    image of the same context)."""
    if not class_names:
        raise DataError("no classes to synthesize")
    if per_context < 1 or variants < 1:
        raise DataError("per_context and variants must be >= 1")
    names = sorted(class_names)
    items: List[PlanItem] = []
    for v in range(variants):
        for ctx in context_ids:
            rng = rng_for(seed, "plan", ctx, v)
            for _ in range(per_context):
                items.append(PlanItem(ctx, names[int(rng.integers(len(names)))]))
    return SynthesisPlan(
        items=tuple(items),
        backend=backend,
        scale_range=scale_range,
        overlap_threshold=overlap_threshold,
        max_attempts=max_attempts,
        seed=seed,
    )


def novel_free_ids(manifest: DatasetManifest) -> Tuple[str, ...]:
    """Ids of images with no novel-split annotation, sorted."""
    out = []
    for rec in manifest.images:
        anns = manifest.annotations_for(rec.id)
        if all(a.label.split != "novel" for a in anns):
            out.append(rec.id)
    return tuple(out)


def context_scene(manifest: DatasetManifest, image_id: str) -> ContextScene:
    anns = manifest.annotations_for(image_id)
    return ContextScene(
        pixels=load_image(manifest, image_id),
        existing_boxes=tuple((a.box, a.label) for a in anns),
        novel_free=all(a.label.split != "novel" for a in anns),
    )


@dataclass
class _Run:
    context_id: str
    variant: int  # prior runs of the same context in the plan
    items: List[Tuple[int, PlanItem]] = field(default_factory=list)


def _split_runs(plan: SynthesisPlan) -> List[_Run]:
    runs: List[_Run] = []
    counts: Dict[str, int] = {}
    for item in plan.items:
        if not runs or runs[-1].context_id != item.context_id:
            n = counts.get(item.context_id, 0)
            counts[item.context_id] = n + 1
            runs.append(_Run(context_id=item.context_id, variant=n))
        runs[-1].items.append((len(runs[-1].items), item))
    return runs


def _draw_placement(
    rng: np.random.Generator,
    ref: ReferenceInstance,
    scene_shape: Tuple[int, int],
    scale_range: Tuple[float, float],
) -> Optional[BBox]:
    """One seeded placement draw; None when the box cannot fit."""
    h_img, w_img = scene_shape
    src_h, src_w = ref.pixels.shape[:2]
    area = float(src_h * src_w) * float(rng.uniform(*scale_range))
    aspect = ref.aspect_ratio
    if rng.random() < 0.5:
        aspect = 1.0 / aspect
    w = max(2, int(round(math.sqrt(area * aspect))))
    h = max(2, int(round(math.sqrt(area / aspect))))
    # One-pixel border margin keeps Poisson boundary pixels inside the image.
    if w > w_img - 2 or h > h_img - 2:
        return None
    x0 = int(rng.integers(1, w_img - w))
    y0 = int(rng.integers(1, h_img - h))
    return BBox(float(x0), float(y0), float(x0 + w), float(y0 + h))


def _synthesize_run(
    run: _Run,
    scene: ContextScene,
    refs_by_class: Mapping[str, Sequence[ReferenceInstance]],
    plan: SynthesisPlan,
    client,
    steps: int,
) -> Tuple[np.ndarray, List[Tuple[BBox, ClassLabel]], int]:
    canvas = scene.pixels.copy()
    h_img, w_img = canvas.shape[:2]
    occupied: List[BBox] = [b for b, _ in scene.existing_boxes]
    placed: List[Tuple[BBox, ClassLabel]] = []
    skipped = 0
    for item_index, item in run.items:
        rng = rng_for(plan.seed, "item", run.context_id, run.variant, item_index)
        refs = refs_by_class.get(item.class_name)
        if not refs:
            raise DataError(f"no references available for class '{item.class_name}'")
        for _ in range(item.count):
            box = None
            ref = None
            for _attempt in range(plan.max_attempts):
                ref = refs[int(rng.integers(len(refs)))]
                candidate = _draw_placement(
                    rng, ref, (h_img, w_img), plan.scale_range
                )
                if candidate is None:
                    continue
                if all(iou(candidate, b) <= plan.overlap_threshold for b in occupied):
                    box = candidate
                    break
            if box is None:
                skipped += 1
                log.warning(
                    "context %s (variant %d): no valid placement for '%s' "
                    "after %d attempts, skipped",
                    run.context_id,
                    run.variant,
                    item.class_name,
                    plan.max_attempts,
                )
                continue
            placement = PlacementSpec(target=box)
            aligned, _rotated = orient_align(ref, placement)
            work = ContextScene(pixels=canvas, existing_boxes=(), novel_free=False)
            if plan.backend is Backend.NAIVE:
                result = compose_naive(work, aligned, placement)
            elif plan.backend is Backend.POISSON:
                result = compose_poisson(work, aligned, placement)
            else:
                if client is None:
                    raise ConfigError(
                        "diffusion backend requires an integration client"
                    )
                stitch, _op = build_stitch(
                    ref,
                    placement,
                    affine_seed=int(rng.integers(2**31)),
                    context_shape=(h_img, w_img),
                )
                bundle = make_bundle(canvas, aligned, stitch)
                result = compose_diffusion(
                    client,
                    bundle,
                    placement,
                    steps=steps,
                    seed=int(rng.integers(2**31)),
                )
            canvas = result.pixels
            occupied.append(box)
            placed.append((box, ref.label))
    return canvas, placed, skipped


def synthesize(
    manifest: DatasetManifest,
    contexts: Union[Mapping[str, ContextScene], Sequence[ContextScene]],
    plan: SynthesisPlan,
    client=None,
    jobs: Optional[int] = None,
    steps: int = 50,
) -> DatasetManifest:
    """Run the plan and return the synthetic manifest (images held in the
    in-memory pixel store until saved).

    Contexts may be given as an id-to-scene mapping or as a sequence
    parallel to plan.context_ids. A placement is accepted when its box
    stays inside the image with a 1-pixel margin and overlaps every
    existing or already-placed box with IoU at most the plan threshold;
    after max_attempts failed draws the instance is skipped and logged.
    Zero accepted placements over the whole plan is an error.
    """
    if isinstance(contexts, Mapping):
        scene_map = dict(contexts)
    else:
        ids = plan.context_ids
        if len(contexts) != len(ids):
            raise DataError(
                f"{len(contexts)} scenes for {len(ids)} distinct plan contexts"
            )
        scene_map = dict(zip(ids, contexts))
    for ctx_id in plan.context_ids:
        if ctx_id not in scene_map:
            raise DataError(f"plan references unknown context '{ctx_id}'")
        if plan.require_novel_free and not scene_map[ctx_id].novel_free:
            raise DataError(f"context '{ctx_id}' is not novel-free")

    refs_by_class: Dict[str, List[ReferenceInstance]] = {}
    for ref in extract_references(manifest):
        refs_by_class.setdefault(ref.label.name, []).append(ref)
    for item in plan.items:
        if item.class_name not in refs_by_class:
            raise DataError(
                f"plan class '{item.class_name}' has no K-shot references"
            )

    runs = _split_runs(plan)
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        results = list(
            pool.map(
                lambda run: _synthesize_run(
                    run, scene_map[run.context_id], refs_by_class, plan, client, steps
                ),
                runs,
            )
        )

    images: List[ImageRecord] = []
    annotations: List[Annotation] = []
    pixels: Dict[str, np.ndarray] = {}
    total_skipped = 0
    for run, (canvas, placed, skipped) in zip(runs, results):
        total_skipped += skipped
        if not placed:
            log.warning(
                "context %s (variant %d): nothing placed, image dropped",
                run.context_id,
                run.variant,
            )
            continue
        image_id = f"{run.context_id}__syn{run.variant}"
        h_img, w_img = canvas.shape[:2]
        images.append(
            ImageRecord(
                id=image_id,
                file=f"JPEGImages/{image_id}.png",
                width=w_img,
                height=h_img,
            )
        )
        for i, (box, label) in enumerate(placed):
            annotations.append(
                Annotation(
                    id=f"{image_id}#obj{i}",
                    image_id=image_id,
                    box=box,
                    label=label,
                )
            )
        pixels[image_id] = canvas
    if not annotations:
        raise DataError(
            "synthesis produced zero placements; check plan, overlap threshold, "
            "and context sizes"
        )
    log.info(
        "synthesized %d images, %d instances, %d skipped",
        len(images),
        len(annotations),
        total_skipped,
    )
    return DatasetManifest(
        images=tuple(images),
        annotations=tuple(annotations),
        splits=dict(manifest.splits),
        seed=plan.seed,
        kshot=None,
        root=None,
        pixels=pixels,
    )


def synthesis_summary(
    plan: SynthesisPlan, synthetic: DatasetManifest
) -> Dict[str, Tuple[int, int, int]]:
    """Per-class (planned, placed, skipped) counts."""
    planned: Dict[str, int] = {}
    for item in plan.items:
        planned[item.class_name] = planned.get(item.class_name, 0) + item.count
    placed: Dict[str, int] = {}
    for ann in synthetic.annotations:
        placed[ann.label.name] = placed.get(ann.label.name, 0) + 1
    return {
        name: (planned[name], placed.get(name, 0), planned[name] - placed.get(name, 0))
        for name in sorted(planned)
    }
