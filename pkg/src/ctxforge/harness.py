"""Diversity sweep harness: grids of datasets where instance count and
context count vary independently, with an optional external detector
hook per cell and curve emission.

Subsets are nested: each axis draws from one seeded permutation, and a
cell takes a prefix of it, so two cells differing in one axis value
share everything else. Dataset materialization runs in parallel across
cells; detector invocations are serialized by default.
"""

from __future__ import annotations

import logging
import shlex
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from ctxforge.compositing import Backend
from ctxforge.errors import DataError
from ctxforge.evaluation import (
    evaluate,
    read_detections_coco,
    read_detections_dir,
)
from ctxforge.manifest import (
    DatasetManifest,
    KShotSelection,
    kshot_manifest,
    merge,
    save_voc,
)
from ctxforge.seeding import rng_for
from ctxforge.synthesis import (
    DEFAULT_MAX_ATTEMPTS,
    DEFAULT_OVERLAP,
    DEFAULT_SCALE_RANGE,
    build_plan,
    context_scene,
    novel_free_ids,
    synthesize,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SweepSpec:
    instance_counts: Tuple[int, ...]
    context_counts: Tuple[int, ...]
    output_dir: Path
    backend: Backend = Backend.NAIVE
    seed: int = 0
    detector_cmd: Optional[str] = None  # template with {train_dir} {out_detections}
    per_context: int = 2
    variants: int = 1
    scale_range: Tuple[float, float] = DEFAULT_SCALE_RANGE
    overlap_threshold: float = DEFAULT_OVERLAP
    max_attempts: int = DEFAULT_MAX_ATTEMPTS
    eval_manifest: Optional[DatasetManifest] = None
    eleven_point: bool = False
    serial_detector: bool = True
    jobs: Optional[int] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "backend", Backend(self.backend))
        object.__setattr__(self, "output_dir", Path(self.output_dir))
        if not self.instance_counts or not self.context_counts:
            raise DataError("sweep needs at least one value per axis")
        for v in tuple(self.instance_counts) + tuple(self.context_counts):
            if v < 1:
                raise DataError(f"axis value {v} must be >= 1")


@dataclass(frozen=True)
class CellResult:
    instance_count: int
    context_count: int
    dataset_path: Path
    instance_ids: Dict[str, Tuple[str, ...]]  # class -> selected annotation ids
    context_ids: Tuple[str, ...]
    map_score: Optional[float] = None
    error: Optional[str] = None


@dataclass(frozen=True)
class SweepResult:
    cells: Tuple[CellResult, ...]
    output_dir: Path


def sweep_pools(
    manifest: DatasetManifest, spec: SweepSpec
) -> Tuple[Dict[str, Tuple[str, ...]], Tuple[str, ...]]:
    """Seeded orderings the cells take prefixes of: per-class instance
    ids from the K-shot pool, and novel-free context ids."""
    if manifest.kshot is None:
        raise DataError("sweep requires a manifest with a K-shot selection")
    max_i = max(spec.instance_counts)
    if manifest.kshot.k < max_i:
        raise DataError(
            f"K-shot pool of {manifest.kshot.k} cannot cover {max_i} instances"
        )
    instance_order: Dict[str, Tuple[str, ...]] = {}
    for name, ids in sorted(manifest.kshot.per_class.items()):
        pool = sorted(ids)
        perm = rng_for(spec.seed, "sweep-instances", name).permutation(len(pool))
        instance_order[name] = tuple(pool[i] for i in perm)
    contexts = novel_free_ids(manifest)
    max_c = max(spec.context_counts)
    if len(contexts) < max_c:
        raise DataError(
            f"{len(contexts)} novel-free contexts available, sweep needs {max_c}"
        )
    perm = rng_for(spec.seed, "sweep-contexts").permutation(len(contexts))
    context_order = tuple(contexts[i] for i in perm)
    return instance_order, context_order


def _materialize_cell(
    manifest: DatasetManifest,
    spec: SweepSpec,
    instance_order: Dict[str, Tuple[str, ...]],
    context_order: Tuple[str, ...],
    i: int,
    c: int,
    client=None,
) -> CellResult:
    selected = {name: tuple(order[:i]) for name, order in instance_order.items()}
    cell_manifest = replace(
        manifest, kshot=KShotSelection(k=i, per_class=selected)
    )
    ctx_ids = context_order[:c]
    scenes = {cid: context_scene(manifest, cid) for cid in ctx_ids}
    plan = build_plan(
        ctx_ids,
        sorted(selected),
        per_context=spec.per_context,
        backend=spec.backend,
        seed=spec.seed,
        scale_range=spec.scale_range,
        overlap_threshold=spec.overlap_threshold,
        max_attempts=spec.max_attempts,
        variants=spec.variants,
    )
    synthetic = synthesize(cell_manifest, scenes, plan, client=client)
    train = merge(kshot_manifest(cell_manifest), synthetic)
    cell_dir = spec.output_dir / f"cell_{i}x{c}"
    save_voc(train, cell_dir)
    return CellResult(
        instance_count=i,
        context_count=c,
        dataset_path=cell_dir,
        instance_ids=selected,
        context_ids=ctx_ids,
    )


def _run_detector(
    cell: CellResult, spec: SweepSpec, groundtruth: DatasetManifest
) -> CellResult:
    out_path = cell.dataset_path / "detections"
    cmd = spec.detector_cmd.format(
        train_dir=str(cell.dataset_path), out_detections=str(out_path)
    )
    proc = subprocess.run(
        shlex.split(cmd), capture_output=True, text=True
    )
    if proc.returncode != 0:
        tail = (proc.stderr or proc.stdout or "").strip().splitlines()[-3:]
        return replace(
            cell,
            error=f"detector exited {proc.returncode}: {' | '.join(tail)}",
        )
    try:
        if out_path.is_dir():
            detections = read_detections_dir(out_path, groundtruth.splits)
        else:
            detections = read_detections_coco(out_path, groundtruth)
        report = evaluate(
            groundtruth, detections, eleven_point=spec.eleven_point
        )
    # OSError/ValueError: output file missing or not valid JSON
    except (DataError, OSError, ValueError) as exc:
        return replace(cell, error=f"evaluation failed: {exc}")
    return replace(cell, map_score=report.mean_ap)


def run_sweep(
    manifest: DatasetManifest, spec: SweepSpec, client=None
) -> SweepResult:
    """Materialize every (instances, contexts) cell under
    output_dir/cell_{i}x{c}/, then (when a detector command is given)
    train/score each cell and record its mAP."""
    instance_order, context_order = sweep_pools(manifest, spec)
    spec.output_dir.mkdir(parents=True, exist_ok=True)
    grid = [(i, c) for i in spec.instance_counts for c in spec.context_counts]

    with ThreadPoolExecutor(max_workers=spec.jobs) as pool:
        cells = list(
            pool.map(
                lambda ic: _materialize_cell(
                    manifest, spec, instance_order, context_order, *ic, client=client
                ),
                grid,
            )
        )

    if spec.detector_cmd:
        groundtruth = spec.eval_manifest or manifest
        if spec.serial_detector:
            cells = [_run_detector(cell, spec, groundtruth) for cell in cells]
        else:
            with ThreadPoolExecutor(max_workers=spec.jobs) as pool:
                cells = list(
                    pool.map(lambda cell: _run_detector(cell, spec, groundtruth), cells)
                )
        for cell in cells:
            if cell.error:
                log.warning(
                    "cell %dx%d: %s",
                    cell.instance_count,
                    cell.context_count,
                    cell.error,
                )
    return SweepResult(cells=tuple(cells), output_dir=spec.output_dir)


def _write_csv(
    path: Path, x_name: str, rows: List[Tuple[int, float]], skipped: int
) -> None:
    lines = [f"{x_name},mAP"]
    for x, y in rows:
        lines.append(f"{x},{y!r}")
    if skipped:
        lines.append(f"# skipped {skipped} cells without mAP")
    path.write_text("\n".join(lines) + "\n")


def _write_svg(
    path: Path, title: str, x_name: str, rows: List[Tuple[int, float]]
) -> None:
    width, height, margin = 480, 320, 48
    xs = [x for x, _ in rows]
    ys = [y for _, y in rows]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = 0.0, max(max(ys), 1e-9)
    span_x = max(x_hi - x_lo, 1)

    def px(x: float) -> float:
        return margin + (x - x_lo) / span_x * (width - 2 * margin)

    def py(y: float) -> float:
        return height - margin - (y - y_lo) / (y_hi - y_lo) * (height - 2 * margin)

    points = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in rows)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.0f}" y="20" text-anchor="middle" '
        f'font-family="sans-serif" font-size="14">{title}</text>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<text x="{width / 2:.0f}" y="{height - 12}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="12">{x_name}</text>',
        f'<text x="14" y="{height / 2:.0f}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="12" '
        f'transform="rotate(-90 14 {height / 2:.0f})">mAP</text>',
        f'<polyline points="{points}" fill="none" stroke="#1f6fb2" stroke-width="2"/>',
    ]
    for x, y in rows:
        parts.append(
            f'<circle cx="{px(x):.1f}" cy="{py(y):.1f}" r="3" fill="#1f6fb2"/>'
        )
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n")


def emit_curves(result: SweepResult, out_dir: Optional[Path] = None) -> List[Path]:
    """Write one CSV plus one SVG per fixed axis value; cells without a
    recorded mAP are excluded and counted in a footer comment."""
    out_dir = Path(out_dir) if out_dir is not None else result.output_dir
    evaluated = [c for c in result.cells if c.map_score is not None]
    if not evaluated:
        raise DataError("no evaluated cells: nothing to plot")
    out_dir.mkdir(parents=True, exist_ok=True)
    written: List[Path] = []

    def one_axis(fixed: str, varied: str, x_name: str) -> None:
        groups: Dict[int, List[CellResult]] = {}
        for cell in result.cells:
            groups.setdefault(getattr(cell, fixed), []).append(cell)
        for fixed_value, cells in sorted(groups.items()):
            rows = sorted(
                (getattr(c, varied), c.map_score)
                for c in cells
                if c.map_score is not None
            )
            if not rows:
                continue
            skipped = sum(1 for c in cells if c.map_score is None)
            stem = f"curve_{x_name}_{fixed[0]}{fixed_value}"
            csv_path = out_dir / f"{stem}.csv"
            svg_path = out_dir / f"{stem}.svg"
            _write_csv(csv_path, x_name, rows, skipped)
            _write_svg(
                svg_path,
                f"mAP vs {x_name} ({fixed} = {fixed_value})",
                x_name,
                rows,
            )
            written.extend([csv_path, svg_path])

    one_axis("instance_count", "context_count", "contexts")
    one_axis("context_count", "instance_count", "instances")
    return written
