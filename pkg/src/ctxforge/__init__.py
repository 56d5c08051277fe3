"""ctxforge: few-shot detection dataset synthesis toolchain.

Composites few-shot object instances into diverse context scenes
(copy-paste, Poisson seamless cloning, or a remote diffusion-integration
service), manages K-shot detection datasets with full annotation
bookkeeping, and evaluates detections with a VOC-style mAP@0.5 scorer.
"""

from ctxforge.compositing import (
    Backend,
    CompositeResult,
    ConditioningBundle,
    SolverStats,
    compose_diffusion,
    compose_naive,
    compose_poisson,
    make_bundle,
    solve_poisson,
)
from ctxforge.core import (
    BBox,
    ClassLabel,
    ContextScene,
    PlacementSpec,
    ReferenceInstance,
    iou,
)
from ctxforge.errors import (
    ConfigError,
    CtxforgeError,
    DataError,
    ProtocolError,
    ServiceError,
)
from ctxforge.evaluation import Detection, EvalReport, delta_report, evaluate
from ctxforge.filtering import HighFreqMap, StitchCollage, build_stitch, high_pass
from ctxforge.geometry import AffineOp, orient_align, sample_affine
from ctxforge.harness import SweepSpec, SweepResult, emit_curves, run_sweep
from ctxforge.integration import IntegrationClient, local_client
from ctxforge.manifest import (
    Annotation,
    DatasetManifest,
    ImageRecord,
    KShotSelection,
    export_coco,
    extract_references,
    load_voc,
    sample_kshot,
    save_voc,
)
from ctxforge.seeding import derive_seed, rng_for
from ctxforge.synthesis import SynthesisPlan, build_plan, synthesize

__version__ = "0.1.0"

__all__ = [
    "AffineOp",
    "Annotation",
    "BBox",
    "Backend",
    "ClassLabel",
    "CompositeResult",
    "ConditioningBundle",
    "ConfigError",
    "ContextScene",
    "CtxforgeError",
    "DataError",
    "DatasetManifest",
    "Detection",
    "EvalReport",
    "HighFreqMap",
    "ImageRecord",
    "IntegrationClient",
    "KShotSelection",
    "PlacementSpec",
    "ProtocolError",
    "ReferenceInstance",
    "ServiceError",
    "SolverStats",
    "StitchCollage",
    "SweepResult",
    "SweepSpec",
    "SynthesisPlan",
    "build_plan",
    "build_stitch",
    "compose_diffusion",
    "compose_naive",
    "compose_poisson",
    "delta_report",
    "derive_seed",
    "emit_curves",
    "evaluate",
    "export_coco",
    "extract_references",
    "high_pass",
    "iou",
    "load_voc",
    "local_client",
    "make_bundle",
    "orient_align",
    "rng_for",
    "run_sweep",
    "sample_affine",
    "sample_kshot",
    "save_voc",
    "solve_poisson",
    "synthesize",
    "__version__",
]
