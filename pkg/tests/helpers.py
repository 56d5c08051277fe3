"""Shared builders for test fixtures: tiny scenes, references, corpora."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
from PIL import Image

from ctxforge.core import BBox, ClassLabel, ContextScene, ReferenceInstance

NOVEL_CLASSES = (
    "airplane",
    "baseballfield",
    "tenniscourt",
    "trainstation",
    "windmill",
)
BASE_CLASSES = ("vehicle", "ship", "bridge", "harbor", "storagetank")

_CLASS_COLORS = {
    name: color
    for name, color in zip(
        NOVEL_CLASSES + BASE_CLASSES,
        [
            (200, 60, 60),
            (60, 180, 75),
            (65, 105, 225),
            (230, 180, 40),
            (150, 60, 190),
            (90, 200, 200),
            (160, 120, 60),
            (220, 120, 160),
            (100, 140, 90),
            (120, 120, 220),
        ],
    )
}


def textured_background(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Smooth ramp plus seeded noise, uint8 RGB."""
    yy, xx = np.mgrid[0:height, 0:width]
    ramp = (
        40.0
        + 120.0 * xx / max(width - 1, 1)
        + 60.0 * yy / max(height - 1, 1)
    )
    base = np.stack([ramp, np.flip(ramp, axis=1), 0.5 * ramp + 80.0], axis=2)
    noise = rng.normal(0.0, 6.0, size=(height, width, 3))
    return np.clip(base + noise, 0, 255).astype(np.uint8)


def draw_object(
    canvas: np.ndarray, box: BBox, class_name: str, rng: np.random.Generator
) -> None:
    """Filled rectangle with a darker border and a diagonal stripe, so
    gradient filters have structure to find."""
    x0, y0, x1, y1 = (int(v) for v in box.as_tuple())
    color = np.array(_CLASS_COLORS[class_name], dtype=np.float64)
    jitter = rng.normal(0.0, 10.0, size=3)
    body = np.clip(color + jitter, 20, 235).astype(np.uint8)
    canvas[y0:y1, x0:x1] = body
    border = np.clip(body.astype(int) - 60, 0, 255).astype(np.uint8)
    canvas[y0:y1, x0:x0 + 2] = border
    canvas[y0:y1, x1 - 2:x1] = border
    canvas[y0:y0 + 2, x0:x1] = border
    canvas[y1 - 2:y1, x0:x1] = border
    for t in range(min(x1 - x0, y1 - y0)):
        canvas[y0 + t, x0 + t] = border


def sample_box(
    rng: np.random.Generator,
    width: int,
    height: int,
    elongated: bool = False,
) -> BBox:
    """Integer box with a 2-px image margin; optionally clearly non-square."""
    if elongated:
        short = int(rng.integers(12, 20))
        long = int(short * rng.uniform(1.7, 2.4))
        w, h = (long, short) if rng.random() < 0.5 else (short, long)
    else:
        w = int(rng.integers(12, 26))
        h = int(rng.integers(12, 26))
    w = min(w, width - 6)
    h = min(h, height - 6)
    x0 = int(rng.integers(2, width - w - 2))
    y0 = int(rng.integers(2, height - h - 2))
    return BBox(x0, y0, x0 + w, y0 + h)


def _place_disjoint(
    rng: np.random.Generator,
    width: int,
    height: int,
    count: int,
    elongated: Sequence[bool],
) -> List[BBox]:
    from ctxforge.core import iou

    boxes: List[BBox] = []
    for i in range(count):
        for _ in range(60):
            box = sample_box(rng, width, height, elongated=elongated[i])
            if all(iou(box, other) <= 0.05 for other in boxes):
                boxes.append(box)
                break
    return boxes


_XML_TEMPLATE = """<annotation>
  <folder>corpus</folder>
  <filename>{filename}</filename>
  <size>
    <width>{width}</width>
    <height>{height}</height>
    <depth>3</depth>
  </size>
{objects}</annotation>
"""

_OBJ_TEMPLATE = """  <object>
    <name>{name}</name>
    <pose>Unspecified</pose>
    <truncated>0</truncated>
    <difficult>{difficult}</difficult>
    <bndbox>
      <xmin>{xmin}</xmin>
      <ymin>{ymin}</ymin>
      <xmax>{xmax}</xmax>
      <ymax>{ymax}</ymax>
    </bndbox>
  </object>
"""


def build_corpus(
    root: Path,
    seed: int = 7,
    novel_free: int = 24,
    novel_images: int = 26,
    novel_per_class: int = 20,
) -> Path:
    """Write a deterministic VOC-style tree: Annotations/*.xml plus
    JPEGImages/*.png, hand-formatted XML (independent of the library's
    writer). First `novel_free` images carry only base-class objects."""
    rng = np.random.default_rng(seed)
    (root / "Annotations").mkdir(parents=True, exist_ok=True)
    (root / "JPEGImages").mkdir(parents=True, exist_ok=True)

    novel_labels = [
        name for name in NOVEL_CLASSES for _ in range(novel_per_class)
    ]
    rng.shuffle(novel_labels)
    per_image: List[List[str]] = [[] for _ in range(novel_images)]
    for i, name in enumerate(novel_labels):
        per_image[i % novel_images].append(name)

    sizes = [(96, 128), (128, 96), (112, 112), (120, 160), (96, 96)]
    total = novel_free + novel_images
    for idx in range(total):
        image_id = f"scene{idx:03d}"
        height, width = sizes[int(rng.integers(0, len(sizes)))]
        canvas = textured_background(rng, height, width)
        objects: List[Tuple[str, BBox, bool]] = []
        if idx < novel_free:
            names = [
                BASE_CLASSES[int(rng.integers(0, len(BASE_CLASSES)))]
                for _ in range(int(rng.integers(1, 4)))
            ]
            elong = [False] * len(names)
        else:
            names = list(per_image[idx - novel_free])
            names += [
                BASE_CLASSES[int(rng.integers(0, len(BASE_CLASSES)))]
                for _ in range(int(rng.integers(0, 2)))
            ]
            elong = [rng.random() < 0.6 for _ in names]
        boxes = _place_disjoint(rng, width, height, len(names), elong)
        for name, box in zip(names, boxes):
            difficult = name in BASE_CLASSES and rng.random() < 0.08
            draw_object(canvas, box, name, rng)
            objects.append((name, box, difficult))

        Image.fromarray(canvas).save(root / "JPEGImages" / f"{image_id}.png")
        obj_xml = "".join(
            _OBJ_TEMPLATE.format(
                name=name,
                difficult=int(difficult),
                xmin=int(box.x_min),
                ymin=int(box.y_min),
                xmax=int(box.x_max),
                ymax=int(box.y_max),
            )
            for name, box, difficult in objects
        )
        (root / "Annotations" / f"{image_id}.xml").write_text(
            _XML_TEMPLATE.format(
                filename=f"{image_id}.png",
                width=width,
                height=height,
                objects=obj_xml,
            )
        )
    return root


def make_reference(
    seed: int = 3,
    width: int = 24,
    height: int = 12,
    class_name: str = "airplane",
) -> ReferenceInstance:
    """Free-standing reference crop with a full-rectangle mask."""
    rng = np.random.default_rng(seed)
    pixels = textured_background(rng, height, width)
    draw_object(pixels, BBox(0, 0, width, height), class_name, rng)
    return ReferenceInstance(
        pixels=pixels,
        mask=np.ones((height, width), dtype=bool),
        label=ClassLabel(name=class_name, split="novel"),
        source=("synthetic", BBox(0, 0, width, height)),
    )


def make_scene(
    seed: int = 11,
    width: int = 96,
    height: int = 80,
    boxes: Sequence[BBox] = (),
    novel_free: bool = True,
) -> ContextScene:
    rng = np.random.default_rng(seed)
    pixels = textured_background(rng, height, width)
    for box in boxes:
        draw_object(pixels, box, "vehicle", rng)
    label = ClassLabel(name="vehicle", split="base")
    return ContextScene(
        pixels=pixels,
        existing_boxes=tuple((box, label) for box in boxes),
        novel_free=novel_free,
    )


def blob_mask(
    rng: np.random.Generator, height: int, width: int, margin: int = 2
) -> np.ndarray:
    """Random connected-ish blob that never touches the array border."""
    mask = np.zeros((height, width), dtype=bool)
    cy = int(rng.integers(margin + 4, height - margin - 4))
    cx = int(rng.integers(margin + 4, width - margin - 4))
    ry = int(rng.integers(3, max(4, (height - 2 * margin) // 2)))
    rx = int(rng.integers(3, max(4, (width - 2 * margin) // 2)))
    yy, xx = np.mgrid[0:height, 0:width]
    ellipse = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    mask |= ellipse
    mask[:margin, :] = False
    mask[-margin:, :] = False
    mask[:, :margin] = False
    mask[:, -margin:] = False
    return mask


# ---------------------------------------------------------------------------
# Evaluation scenarios: the same draws as library objects and as the plain
# tuples the brute-force AP oracle consumes


def make_groundtruth(spec, splits=None):
    """spec: {image_id: [(class, box, difficult), ...]}; box as tuple."""
    from ctxforge.manifest import Annotation, DatasetManifest, ImageRecord

    splits = splits or {}
    images = []
    annotations = []
    for image_id, objs in sorted(spec.items()):
        images.append(
            ImageRecord(
                id=image_id, file=f"JPEGImages/{image_id}.png", width=200, height=200
            )
        )
        for n, (name, box, difficult) in enumerate(objs):
            split = splits.get(name, "novel")
            annotations.append(
                Annotation(
                    id=f"{image_id}#obj{n}",
                    image_id=image_id,
                    box=BBox(*box),
                    label=ClassLabel(name=name, split=split),
                    difficult=difficult,
                )
            )
    split_map = {}
    for ann in annotations:
        split_map[ann.label.name] = ann.label.split
    return DatasetManifest(
        images=tuple(images), annotations=tuple(annotations), splits=split_map
    )


def make_detections(entries, splits=None):
    """entries: [(image_id, class, confidence, box)]"""
    from ctxforge.evaluation import Detection

    splits = splits or {}
    return [
        Detection(
            image_id=image_id,
            box=BBox(*box),
            label=ClassLabel(name=name, split=splits.get(name, "novel")),
            confidence=conf,
        )
        for image_id, name, conf, box in entries
    ]


def random_scenario(rng, n_classes=2, n_images=3, max_gt=6, max_det=8):
    """Random GT/detection structures in both library and oracle forms."""
    classes = [f"cls{i}" for i in range(n_classes)]
    image_ids = [f"im{i}" for i in range(n_images)]
    gt_spec = {image_id: [] for image_id in image_ids}
    oracle_gt = {name: {} for name in classes}
    for name in classes:
        total = 0
        for image_id in image_ids:
            n = int(rng.integers(0, max_gt // n_images + 2))
            for _ in range(n):
                if total >= max_gt:
                    break
                x0 = float(rng.integers(0, 160))
                y0 = float(rng.integers(0, 160))
                w = float(rng.integers(8, 40))
                h = float(rng.integers(8, 40))
                box = (x0, y0, min(x0 + w, 200.0), min(y0 + h, 200.0))
                difficult = bool(rng.random() < 0.2)
                gt_spec[image_id].append((name, box, difficult))
                oracle_gt[name].setdefault(image_id, []).append((box, difficult))
                total += 1
    dets = []
    for name in classes:
        n = int(rng.integers(0, max_det + 1))
        for _ in range(n):
            image_id = image_ids[int(rng.integers(0, n_images))]
            # bias half the detections toward real objects
            anchors = [b for c, b, _ in gt_spec[image_id] if c == name]
            if anchors and rng.random() < 0.5:
                base = anchors[int(rng.integers(0, len(anchors)))]
                dx = float(rng.integers(-6, 7))
                dy = float(rng.integers(-6, 7))
                box = (base[0] + dx, base[1] + dy, base[2] + dx, base[3] + dy)
            else:
                x0 = float(rng.integers(0, 160))
                y0 = float(rng.integers(0, 160))
                box = (
                    x0,
                    y0,
                    x0 + float(rng.integers(8, 40)),
                    y0 + float(rng.integers(8, 40)),
                )
            conf = round(float(rng.random()), 3)
            dets.append((image_id, name, conf, box))
    return gt_spec, oracle_gt, dets
