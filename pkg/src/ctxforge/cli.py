"""Command-line front door: synth, sweep, eval, and preview subcommands.

Configuration resolves in three layers: built-in defaults, then a TOML
config file (top-level keys apply to every command, a [command] section
overrides them), then explicit flags. The fully resolved configuration
is echoed to output_dir/config.resolved.toml before any work starts.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 service
error. Errors print one machine-parseable line "ctxforge: <code>: ..."
to stderr.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from ctxforge.compositing import Backend
from ctxforge.errors import ConfigError, CtxforgeError, DataError, ServiceError

log = logging.getLogger(__name__)

_COMMON_DEFAULTS: Dict[str, Any] = {"seed": 0, "jobs": None}

DEFAULTS: Dict[str, Dict[str, Any]] = {
    "synth": {
        **_COMMON_DEFAULTS,
        "backend": "naive",
        "k": 3,
        "contexts": 4,
        "per_context": 2,
        "variants": 1,
        "scale_range": (0.7, 1.3),
        "overlap": 0.1,
        "max_attempts": 50,
        "steps": 50,
    },
    "sweep": {
        **_COMMON_DEFAULTS,
        "backend": "naive",
        "k": 3,
        "per_context": 2,
        "variants": 1,
        "scale_range": (0.7, 1.3),
        "overlap": 0.1,
        "max_attempts": 50,
        "steps": 50,
        "eleven_point": False,
    },
    "eval": {**_COMMON_DEFAULTS, "iou": 0.5, "eleven_point": False},
    "preview": {
        **_COMMON_DEFAULTS,
        "backend": "naive",
        "k": 3,
        "count": 4,
        "per_context": 2,
        "scale_range": (0.7, 1.3),
        "overlap": 0.1,
        "max_attempts": 50,
        "steps": 50,
    },
}


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved settings for one command invocation."""

    command: str
    values: Dict[str, Any]

    def get(self, key: str, default: Any = None) -> Any:
        value = self.values.get(key)
        return default if value is None else value

    def require(self, key: str, flag: Optional[str] = None) -> Any:
        value = self.values.get(key)
        if value is None:
            flag = flag or "--" + key.replace("_", "-")
            raise ConfigError(f"missing required setting '{key}' (set {flag})")
        return value


def _as_tuple(value: Any, convert) -> Tuple:
    if isinstance(value, str):
        parts = [p.strip() for p in value.split(",") if p.strip()]
        return tuple(convert(p) for p in parts)
    if isinstance(value, (list, tuple)):
        return tuple(convert(v) for v in value)
    return (convert(value),)


_NORMALIZERS = {
    "novel": lambda v: _as_tuple(v, str),
    "instances": lambda v: _as_tuple(v, int),
    "contexts_list": lambda v: _as_tuple(v, int),
    "scale_range": lambda v: _as_tuple(v, float),
    "root": Path,
    "out": Path,
    "gt": Path,
    "detections": Path,
    "baseline": Path,
}


def resolve_config(command: str, args: argparse.Namespace, keys: Sequence[str]) -> RunConfig:
    merged: Dict[str, Any] = dict(DEFAULTS[command])
    config_path = getattr(args, "config", None)
    if config_path:
        merged.update(_load_toml(Path(config_path), command, keys))
    for key in keys:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    for key, norm in _NORMALIZERS.items():
        if merged.get(key) is not None:
            try:
                merged[key] = norm(merged[key])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for '{key}': {exc}")
    scale = merged.get("scale_range")
    if scale is not None and len(scale) != 2:
        raise ConfigError(f"scale_range needs exactly two values, got {scale}")
    return RunConfig(command=command, values=merged)


def _load_toml(path: Path, command: str, keys: Sequence[str]) -> Dict[str, Any]:
    import tomli

    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = tomli.loads(path.read_text())
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}")
    known = set(keys)
    out: Dict[str, Any] = {}
    for key, value in data.items():
        if isinstance(value, dict):
            if key not in DEFAULTS:
                raise ConfigError(f"{path}: unknown section [{key}]")
            continue
        if key not in known:
            raise ConfigError(f"{path}: unknown setting '{key}' for {command}")
        out[key] = value
    for key, value in data.get(command, {}).items():
        if key not in known:
            raise ConfigError(f"{path}: unknown setting '{key}' in [{command}]")
        out[key] = value
    return out


def write_resolved(config: RunConfig, out_dir: Path) -> None:
    import toml

    def plain(value: Any) -> Any:
        if isinstance(value, Path):
            return str(value)
        if isinstance(value, tuple):
            return [plain(v) for v in value]
        if isinstance(value, Backend):
            return value.value
        return value

    data = {
        k: plain(v) for k, v in sorted(config.values.items()) if v is not None
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved.toml").write_text(toml.dumps(data))


# ---------------------------------------------------------------------------
# Service endpoint plumbing


class _LocalService:
    """Runs the integration service in a background thread on an
    ephemeral port; used by --mock-endpoint."""

    def __init__(self) -> None:
        try:
            from ctxforge_service.app import create_app
        except ImportError:
            raise ConfigError(
                "--mock-endpoint requires the ctxforge-service package "
                "(pip install ./service)"
            )
        import threading

        import uvicorn

        self._server = uvicorn.Server(
            uvicorn.Config(
                create_app(mode="mock"),
                host="127.0.0.1",
                port=0,
                log_level="warning",
            )
        )
        self._thread = threading.Thread(target=self._server.run, daemon=True)
        self._thread.start()
        deadline = time.monotonic() + 15.0
        while not self._server.started:
            if time.monotonic() > deadline or not self._thread.is_alive():
                raise ServiceError("local integration service failed to start")
            time.sleep(0.02)
        sock = self._server.servers[0].sockets[0]
        self.endpoint = f"http://127.0.0.1:{sock.getsockname()[1]}"

    def stop(self) -> None:
        self._server.should_exit = True
        self._thread.join(timeout=10.0)


def _make_client(config: RunConfig):
    """(client, cleanup) for the configured backend; (None, noop) unless
    the backend is diffusion. Validates before any I/O."""
    from ctxforge.integration import IntegrationClient, local_client

    backend = Backend(config.get("backend", "naive"))
    if backend is not Backend.DIFFUSION:
        return None, lambda: None
    endpoint = config.get("endpoint") or os.environ.get("CTXFORGE_ENDPOINT")
    if config.get("mock"):
        client = local_client()
        return client, client.close
    if config.get("mock_endpoint"):
        service = _LocalService()
        client = IntegrationClient(service.endpoint)

        def cleanup() -> None:
            client.close()
            service.stop()

        return client, cleanup
    if not endpoint:
        raise ConfigError(
            "diffusion backend needs --endpoint (or CTXFORGE_ENDPOINT), "
            "--mock, or --mock-endpoint"
        )
    client = IntegrationClient(endpoint)
    return client, client.close


def _validate_backend_config(config: RunConfig) -> None:
    """The client-requirement check, run before any dataset I/O."""
    try:
        backend = Backend(config.get("backend", "naive"))
    except ValueError:
        raise ConfigError(f"unknown backend '{config.get('backend')}'")
    if backend is Backend.DIFFUSION:
        endpoint = config.get("endpoint") or os.environ.get("CTXFORGE_ENDPOINT")
        if not (endpoint or config.get("mock") or config.get("mock_endpoint")):
            raise ConfigError(
                "diffusion backend needs --endpoint (or CTXFORGE_ENDPOINT), "
                "--mock, or --mock-endpoint"
            )


def _prepared_manifest(config: RunConfig):
    from ctxforge.manifest import load_voc, sample_kshot

    root = config.require("root")
    novel = config.require("novel")
    manifest = load_voc(root, novel_classes=novel)
    return sample_kshot(manifest, novel, int(config.require("k")), int(config.get("seed")))


def _pick_contexts(manifest, count: int, seed: int) -> Tuple[str, ...]:
    from ctxforge.seeding import rng_for
    from ctxforge.synthesis import novel_free_ids

    free = novel_free_ids(manifest)
    if len(free) < count:
        raise DataError(
            f"{len(free)} novel-free context images available, need {count}"
        )
    perm = rng_for(seed, "contexts").permutation(len(free))
    return tuple(free[i] for i in perm[:count])


# ---------------------------------------------------------------------------
# Commands


def cmd_synth(config: RunConfig) -> int:
    from ctxforge.manifest import export_coco, kshot_manifest, merge, save_voc
    from ctxforge.synthesis import (
        build_plan,
        context_scene,
        synthesis_summary,
        synthesize,
    )

    out = Path(config.require("out"))
    _validate_backend_config(config)
    config.require("root")
    novel = config.require("novel")
    write_resolved(config, out)

    manifest = _prepared_manifest(config)
    seed = int(config.get("seed"))
    ctx_ids = _pick_contexts(manifest, int(config.get("contexts")), seed)
    plan = build_plan(
        ctx_ids,
        novel,
        per_context=int(config.get("per_context")),
        backend=Backend(config.get("backend")),
        seed=seed,
        scale_range=tuple(config.get("scale_range")),
        overlap_threshold=float(config.get("overlap")),
        max_attempts=int(config.get("max_attempts")),
        variants=int(config.get("variants")),
    )
    scenes = {cid: context_scene(manifest, cid) for cid in ctx_ids}
    client, cleanup = _make_client(config)
    try:
        synthetic = synthesize(
            manifest,
            scenes,
            plan,
            client=client,
            jobs=config.get("jobs"),
            steps=int(config.get("steps")),
        )
    finally:
        cleanup()
    merged = merge(kshot_manifest(manifest), synthetic)
    written = save_voc(merged, out)
    export_coco(written, out / "coco.json")

    summary = synthesis_summary(plan, synthetic)
    print(f"wrote {out}")
    print(f"{'class':<16} {'planned':>7} {'placed':>7} {'skipped':>7}")
    for name, (planned, placed, skipped) in summary.items():
        print(f"{name:<16} {planned:>7} {placed:>7} {skipped:>7}")
    few = len(merged.annotations) - len(synthetic.annotations)
    print(
        f"total: {len(merged.images)} images, {few} few-shot + "
        f"{len(synthetic.annotations)} synthetic instances"
    )
    return 0


def cmd_sweep(config: RunConfig) -> int:
    import json

    from ctxforge.harness import SweepSpec, emit_curves, run_sweep

    out = Path(config.require("out"))
    _validate_backend_config(config)
    config.require("root")
    instances = config.require("instances")
    contexts = config.require("contexts_list", flag="--contexts")
    if max(instances) > int(config.require("k")):
        raise ConfigError(
            f"--instances max {max(instances)} exceeds the K-shot pool k="
            f"{config.get('k')}"
        )
    write_resolved(config, out)

    manifest = _prepared_manifest(config)
    spec = SweepSpec(
        instance_counts=instances,
        context_counts=contexts,
        output_dir=out,
        backend=Backend(config.get("backend")),
        seed=int(config.get("seed")),
        detector_cmd=config.get("detector_cmd"),
        per_context=int(config.get("per_context")),
        variants=int(config.get("variants")),
        scale_range=tuple(config.get("scale_range")),
        overlap_threshold=float(config.get("overlap")),
        max_attempts=int(config.get("max_attempts")),
        eleven_point=bool(config.get("eleven_point")),
        jobs=config.get("jobs"),
    )
    client, cleanup = _make_client(config)
    try:
        result = run_sweep(manifest, spec, client=client)
    finally:
        cleanup()

    cells_data = [
        {
            "instances": c.instance_count,
            "contexts": c.context_count,
            "path": str(c.dataset_path),
            "map": c.map_score,
            "error": c.error,
        }
        for c in result.cells
    ]
    (out / "sweep_result.json").write_text(json.dumps(cells_data, indent=2) + "\n")

    print(f"{'instances':>9} {'contexts':>8} {'mAP':>8}  path")
    for cell in result.cells:
        score = f"{cell.map_score * 100.0:.2f}" if cell.map_score is not None else "-"
        note = f"  [{cell.error}]" if cell.error else ""
        print(
            f"{cell.instance_count:>9} {cell.context_count:>8} {score:>8}"
            f"  {cell.dataset_path}{note}"
        )
    if any(c.map_score is not None for c in result.cells):
        written = emit_curves(result)
        print(f"curves: {len(written)} files under {out}")
    else:
        print("no evaluated cells; datasets written, curves skipped")
    return 0


def cmd_eval(config: RunConfig) -> int:
    from ctxforge.evaluation import (
        delta_report,
        evaluate,
        format_delta_table,
        format_report_table,
        load_report,
        read_detections_coco,
        read_detections_dir,
        save_report,
    )
    from ctxforge.manifest import load_manifest, load_voc

    gt_path = Path(config.require("gt"))
    det_path = Path(config.require("detections"))
    if gt_path.suffix == ".json":
        groundtruth = load_manifest(gt_path)
    else:
        groundtruth = load_voc(gt_path)
    if det_path.is_dir():
        detections = read_detections_dir(det_path, groundtruth.splits)
    else:
        detections = read_detections_coco(det_path, groundtruth)
    report = evaluate(
        groundtruth,
        detections,
        iou_threshold=float(config.get("iou")),
        eleven_point=bool(config.get("eleven_point")),
    )
    print(format_report_table(report))
    out = config.get("out")
    if out is not None:
        out = Path(out)
        write_resolved(config, out)
        save_report(report, out / "report.json")
        print(f"report written to {out / 'report.json'}")
    baseline_path = config.get("baseline")
    if baseline_path is not None:
        baseline = load_report(baseline_path)
        delta = delta_report(baseline, report)
        print()
        print(format_delta_table(baseline, report, delta))
    return 0


def cmd_preview(config: RunConfig) -> int:
    from PIL import Image, ImageDraw

    from ctxforge.core import PlacementSpec
    from ctxforge.filtering import build_stitch
    from ctxforge.manifest import extract_references
    from ctxforge.seeding import derive_seed
    from ctxforge.synthesis import build_plan, context_scene, synthesize

    out = Path(config.require("out"))
    _validate_backend_config(config)
    config.require("root")
    novel = config.require("novel")
    write_resolved(config, out)

    manifest = _prepared_manifest(config)
    seed = int(config.get("seed"))
    count = int(config.get("count"))
    ctx_ids = _pick_contexts(manifest, count, seed)
    plan = build_plan(
        ctx_ids,
        novel,
        per_context=int(config.get("per_context")),
        backend=Backend(config.get("backend")),
        seed=seed,
        scale_range=tuple(config.get("scale_range")),
        overlap_threshold=float(config.get("overlap")),
        max_attempts=int(config.get("max_attempts")),
    )
    scenes = {cid: context_scene(manifest, cid) for cid in ctx_ids}
    client, cleanup = _make_client(config)
    try:
        synthetic = synthesize(
            manifest,
            scenes,
            plan,
            client=client,
            jobs=config.get("jobs"),
            steps=int(config.get("steps")),
        )
    finally:
        cleanup()

    first_ref = {}
    for ref in extract_references(manifest):
        first_ref.setdefault(ref.label.name, ref)

    written = []
    for rec in synthetic.images[:count]:
        canvas = synthetic.pixels[rec.id]
        im = Image.fromarray(canvas.copy())
        draw = ImageDraw.Draw(im)
        stitch_union = np.zeros(canvas.shape[:2], dtype=np.float64)
        for i, ann in enumerate(synthetic.annotations_for(rec.id)):
            draw.rectangle(ann.box.as_tuple(), outline=(220, 40, 40), width=2)
            collage, _ = build_stitch(
                first_ref[ann.label.name],
                PlacementSpec(target=ann.box),
                affine_seed=derive_seed(seed, "preview", rec.id, i),
                context_shape=canvas.shape[:2],
            )
            stitch_union = np.maximum(stitch_union, collage.canvas)
        gray = np.rint(np.clip(stitch_union, 0.0, 1.0) * 255.0).astype(np.uint8)
        panel = np.concatenate(
            [np.asarray(im), np.repeat(gray[..., None], 3, axis=2)], axis=1
        )
        path = out / f"preview_{rec.id}.png"
        Image.fromarray(panel).save(path)
        written.append(path)
    for path in written:
        print(path)
    print(
        "left: composite with synthetic boxes; right: conditioning collage "
        "(rebuilt per class, illustrative)"
    )
    return 0


# ---------------------------------------------------------------------------
# Argument parsing


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="TOML", help="config file; flags override it")
    p.add_argument("--seed", type=int, help="root seed for all randomness")
    p.add_argument("--jobs", type=int, help="worker pool size (default: cores)")


def _add_dataset_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--root", help="dataset root (Annotations/ + JPEGImages/)")
    p.add_argument("--novel", help="comma-separated novel class names")
    p.add_argument("--k", type=int, help="instances per novel class (K-shot)")


def _add_plan_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument(
        "--backend",
        choices=[b.value for b in Backend],
        help="compositing backend",
    )
    p.add_argument("--per-context", dest="per_context", type=int,
                   help="instances planned per context image")
    p.add_argument("--scale-range", dest="scale_range", metavar="LO,HI",
                   help="area factor range for placed boxes")
    p.add_argument("--overlap", type=float, help="max IoU against existing boxes")
    p.add_argument("--max-attempts", dest="max_attempts", type=int,
                   help="placement draws before skipping an instance")
    p.add_argument("--steps", type=int, help="diffusion denoising steps")
    p.add_argument("--endpoint", help="integration service URL "
                   "(or CTXFORGE_ENDPOINT)")
    p.add_argument("--mock", action="store_const", const=True,
                   help="use the in-process integration stub")
    p.add_argument("--mock-endpoint", dest="mock_endpoint", action="store_const",
                   const=True,
                   help="start the bundled service locally in mock mode")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctxforge",
        description="Context-diverse synthetic datasets for few-shot "
        "object detection.",
    )
    parser.add_argument(
        "-v", "--verbose", action="count", default=0,
        help="increase log verbosity (repeatable)",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    synth = sub.add_parser(
        "synth", help="synthesize a few-shot plus synthetic training set"
    )
    _add_common(synth)
    _add_dataset_flags(synth)
    _add_plan_flags(synth)
    synth.add_argument("--contexts", type=int,
                       help="number of context images to use")
    synth.add_argument("--variants", type=int,
                       help="synthetic images per context")
    synth.add_argument("--out", help="output dataset directory")
    synth.set_defaults(func=cmd_synth, keys=[
        "seed", "jobs", "root", "novel", "k", "backend", "per_context",
        "scale_range", "overlap", "max_attempts", "steps", "endpoint", "mock",
        "mock_endpoint", "contexts", "variants", "out",
    ])

    sweep = sub.add_parser(
        "sweep", help="materialize an instance-by-context diversity grid"
    )
    _add_common(sweep)
    _add_dataset_flags(sweep)
    _add_plan_flags(sweep)
    sweep.add_argument("--instances", help="comma-separated instance counts")
    sweep.add_argument("--contexts", dest="contexts_list",
                       help="comma-separated context counts")
    sweep.add_argument("--variants", type=int,
                       help="synthetic images per context")
    sweep.add_argument("--detector-cmd", dest="detector_cmd",
                       metavar="TEMPLATE",
                       help="external detector command with {train_dir} and "
                       "{out_detections} placeholders")
    sweep.add_argument("--eleven-point", dest="eleven_point",
                       action="store_const", const=True,
                       help="11-point AP interpolation for cell scores")
    sweep.add_argument("--out", help="sweep output directory")
    sweep.set_defaults(func=cmd_sweep, keys=[
        "seed", "jobs", "root", "novel", "k", "backend", "per_context",
        "scale_range", "overlap", "max_attempts", "steps", "endpoint", "mock",
        "mock_endpoint", "instances", "contexts_list", "variants",
        "detector_cmd", "eleven_point", "out",
    ])

    evalp = sub.add_parser("eval", help="score detections against ground truth")
    _add_common(evalp)
    evalp.add_argument("--gt", help="VOC dataset directory or manifest JSON")
    evalp.add_argument("--detections",
                       help="per-class text directory or COCO results JSON")
    evalp.add_argument("--iou", type=float, help="match threshold")
    evalp.add_argument("--eleven-point", dest="eleven_point",
                       action="store_const", const=True,
                       help="11-point AP interpolation")
    evalp.add_argument("--baseline", metavar="REPORT",
                       help="baseline report JSON; prints delta columns")
    evalp.add_argument("--out", help="directory for report.json")
    evalp.set_defaults(func=cmd_eval, keys=[
        "seed", "jobs", "gt", "detections", "iou", "eleven_point", "baseline",
        "out",
    ])

    preview = sub.add_parser(
        "preview", help="render sample composites with boxes and collages"
    )
    _add_common(preview)
    _add_dataset_flags(preview)
    _add_plan_flags(preview)
    preview.add_argument("--count", type=int, help="number of samples")
    preview.add_argument("--out", help="output directory for PNG sheets")
    preview.set_defaults(func=cmd_preview, keys=[
        "seed", "jobs", "root", "novel", "k", "backend", "per_context",
        "scale_range", "overlap", "max_attempts", "steps", "endpoint", "mock",
        "mock_endpoint", "count", "out",
    ])
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING
    if args.verbose == 1:
        level = logging.INFO
    elif args.verbose >= 2:
        level = logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = resolve_config(args.command, args, args.keys)
        return args.func(config)
    except CtxforgeError as exc:
        print(f"ctxforge: {exc.code}: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # pragma: no cover - last-resort surface
        print(f"ctxforge: internal: {exc!r}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
