"""Dataset manifests: VOC-style ingestion, JSON persistence, COCO export,
K-shot sampling, and reference extraction.

A manifest is an immutable snapshot of a detection dataset: image
records, box annotations with base/novel class labels, the split map,
the generating seed, and (optionally) a K-shot selection plus an
in-memory pixel store for images not yet written to disk. Images are
kept sorted by id and annotations by (image id, object index) so that
structurally equal datasets compare equal regardless of assembly order.
"""

from __future__ import annotations

import json
import shutil
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from ctxforge.core import BBox, ClassLabel, ReferenceInstance, pixel_bounds
from ctxforge.errors import DataError
from ctxforge.seeding import rng_for

MANIFEST_SCHEMA = "ctxforge-manifest/1"


@dataclass(frozen=True)
class ImageRecord:
    id: str
    file: str  # path relative to the dataset root
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise DataError(f"image {self.id}: bad dimensions {self.width}x{self.height}")


@dataclass(frozen=True)
class Annotation:
    id: str  # "{image_id}#obj{n}"
    image_id: str
    box: BBox
    label: ClassLabel
    difficult: bool = False


@dataclass(frozen=True)
class KShotSelection:
    k: int
    per_class: Dict[str, Tuple[str, ...]]  # class name -> annotation ids


def _ann_sort_key(ann: Annotation) -> Tuple[str, int, str]:
    head, sep, tail = ann.id.rpartition("#obj")
    if sep and tail.isdigit():
        return (ann.image_id, int(tail), "")
    return (ann.image_id, 1 << 30, ann.id)


@dataclass(frozen=True)
class DatasetManifest:
    images: Tuple[ImageRecord, ...]
    annotations: Tuple[Annotation, ...]
    splits: Dict[str, str]  # class name -> "base" | "novel"
    seed: int = 0
    kshot: Optional[KShotSelection] = None
    root: Optional[Path] = field(default=None, compare=False)
    # Rasters for images that exist only in memory (synthetic output).
    pixels: Dict[str, np.ndarray] = field(
        default_factory=dict, compare=False, repr=False
    )

    def __post_init__(self) -> None:
        images = tuple(sorted(self.images, key=lambda r: r.id))
        annotations = tuple(sorted(self.annotations, key=_ann_sort_key))
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "annotations", annotations)
        if self.root is not None:
            object.__setattr__(self, "root", Path(self.root))

        by_id: Dict[str, ImageRecord] = {}
        for rec in images:
            if rec.id in by_id:
                raise DataError(f"duplicate image id '{rec.id}'")
            by_id[rec.id] = rec
        anns_by_id: Dict[str, Annotation] = {}
        anns_by_image: Dict[str, List[Annotation]] = {}
        for ann in annotations:
            if ann.id in anns_by_id:
                raise DataError(f"duplicate annotation id '{ann.id}'")
            anns_by_id[ann.id] = ann
            if ann.image_id not in by_id:
                raise DataError(
                    f"annotation '{ann.id}' references unknown image '{ann.image_id}'"
                )
            split = self.splits.get(ann.label.name)
            if split is None:
                raise DataError(f"class '{ann.label.name}' missing from split map")
            if split != ann.label.split:
                raise DataError(
                    f"annotation '{ann.id}': label split '{ann.label.split}' "
                    f"disagrees with split map '{split}'"
                )
            anns_by_image.setdefault(ann.image_id, []).append(ann)
        for name, split in self.splits.items():
            if split not in ("base", "novel"):
                raise DataError(f"class '{name}': invalid split '{split}'")
        if self.kshot is not None:
            for name, selected in self.kshot.per_class.items():
                if self.splits.get(name) != "novel":
                    raise DataError(f"k-shot selection for non-novel class '{name}'")
                if len(selected) != self.kshot.k:
                    raise DataError(
                        f"class '{name}': {len(selected)} selections, "
                        f"expected k={self.kshot.k}"
                    )
                for ann_id in selected:
                    ann = anns_by_id.get(ann_id)
                    if ann is None or ann.label.name != name:
                        raise DataError(
                            f"k-shot selection '{ann_id}' is not an annotation "
                            f"of class '{name}'"
                        )
        object.__setattr__(self, "_images_by_id", by_id)
        object.__setattr__(self, "_anns_by_id", anns_by_id)
        object.__setattr__(
            self,
            "_anns_by_image",
            {k: tuple(v) for k, v in anns_by_image.items()},
        )

    def image(self, image_id: str) -> ImageRecord:
        rec = self._images_by_id.get(image_id)
        if rec is None:
            raise DataError(f"unknown image id '{image_id}'")
        return rec

    def annotation(self, ann_id: str) -> Annotation:
        ann = self._anns_by_id.get(ann_id)
        if ann is None:
            raise DataError(f"unknown annotation id '{ann_id}'")
        return ann

    def annotations_for(self, image_id: str) -> Tuple[Annotation, ...]:
        self.image(image_id)
        return self._anns_by_image.get(image_id, ())

    def class_names(self, split: Optional[str] = None) -> Tuple[str, ...]:
        names = (
            n for n, s in self.splits.items() if split is None or s == split
        )
        return tuple(sorted(names))

    def instances_of(self, class_name: str) -> Tuple[Annotation, ...]:
        return tuple(a for a in self.annotations if a.label.name == class_name)


def load_image(manifest: DatasetManifest, image_id: str) -> np.ndarray:
    """RGB uint8 pixels for an image, from the in-memory store or disk."""
    stored = manifest.pixels.get(image_id)
    if stored is not None:
        return stored
    rec = manifest.image(image_id)
    if manifest.root is None:
        raise DataError(f"image '{image_id}' has no pixel data and no dataset root")
    path = manifest.root / rec.file
    if not path.exists():
        raise DataError(f"image file missing: {path}")
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


# ---------------------------------------------------------------------------
# VOC-style XML directories


def _parse_voc_xml(
    xml_path: Path,
    novel: frozenset,
    classes: Optional[frozenset],
    class_map: Optional[Mapping[str, str]],
) -> Tuple[ImageRecord, List[Annotation]]:
    try:
        tree = ET.parse(xml_path)
    except ET.ParseError as exc:
        raise DataError(f"malformed XML {xml_path}: {exc}")
    root = tree.getroot()
    filename = root.findtext("filename")
    if not filename:
        raise DataError(f"{xml_path}: missing <filename>")
    try:
        width = int(root.findtext("size/width"))
        height = int(root.findtext("size/height"))
    except (TypeError, ValueError):
        raise DataError(f"{xml_path}: missing or non-integer <size>")
    image_id = xml_path.stem
    record = ImageRecord(
        id=image_id, file=f"JPEGImages/{filename}", width=width, height=height
    )
    annotations: List[Annotation] = []
    for n, obj in enumerate(root.iter("object")):
        name = obj.findtext("name")
        if not name:
            raise DataError(f"{xml_path}: object {n} has no <name>")
        if class_map is not None:
            name = class_map.get(name, name)
        if classes is not None and name not in classes:
            raise DataError(f"{xml_path}: unknown class '{name}'")
        difficult = (obj.findtext("difficult") or "0").strip() not in ("", "0")
        bnd = obj.find("bndbox")
        if bnd is None:
            raise DataError(f"{xml_path}: object {n} has no <bndbox>")
        try:
            coords = [float(bnd.findtext(tag)) for tag in ("xmin", "ymin", "xmax", "ymax")]
        except (TypeError, ValueError):
            raise DataError(f"{xml_path}: object {n} has a non-numeric <bndbox>")
        try:
            box = BBox(*coords)
        except DataError as exc:
            raise DataError(f"{xml_path}: object {n}: {exc}")
        if box.x_min < 0 or box.y_min < 0 or box.x_max > width or box.y_max > height:
            raise DataError(
                f"{xml_path}: box {tuple(coords)} outside image bounds "
                f"{width}x{height}"
            )
        split = "novel" if name in novel else "base"
        annotations.append(
            Annotation(
                id=f"{image_id}#obj{n}",
                image_id=image_id,
                box=box,
                label=ClassLabel(name=name, split=split),
                difficult=difficult,
            )
        )
    return record, annotations


def load_voc(
    root,
    novel_classes: Sequence[str] = (),
    classes: Optional[Sequence[str]] = None,
    class_map: Optional[Mapping[str, str]] = None,
    seed: int = 0,
) -> DatasetManifest:
    """Read a VOC-style directory (Annotations/*.xml + JPEGImages/).

    When the directory carries a manifest.json written by save_voc, its
    split map, seed, and K-shot selection take precedence over the
    arguments, making save/load a faithful round trip.
    """
    root = Path(root)
    ann_dir = root / "Annotations"
    if not ann_dir.is_dir():
        raise DataError(f"no Annotations directory under {root}")
    novel = frozenset(novel_classes)
    known = frozenset(classes) if classes is not None else None

    sidecar = root / "manifest.json"
    meta = None
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
        if meta.get("schema") != MANIFEST_SCHEMA:
            raise DataError(
                f"{sidecar}: schema '{meta.get('schema')}' is not {MANIFEST_SCHEMA}"
            )
        novel = frozenset(
            n for n, s in meta.get("splits", {}).items() if s == "novel"
        )

    images: List[ImageRecord] = []
    annotations: List[Annotation] = []
    splits: Dict[str, str] = {}
    for xml_path in sorted(ann_dir.glob("*.xml")):
        record, anns = _parse_voc_xml(xml_path, novel, known, class_map)
        image_path = root / record.file
        if not image_path.exists():
            raise DataError(f"{xml_path}: missing image file {image_path}")
        images.append(record)
        annotations.extend(anns)
        for ann in anns:
            splits.setdefault(ann.label.name, ann.label.split)
    for name in novel:
        splits.setdefault(name, "novel")
    if classes is not None:
        for name in classes:
            splits.setdefault(name, "novel" if name in novel else "base")

    kshot = None
    if meta is not None:
        splits = dict(meta.get("splits", splits))
        seed = int(meta.get("seed", seed))
        if "annotations" in meta:
            # Sidecar ids are authoritative: positional "#obj{n}" ids drift
            # once a save drops some of an image's instances.
            ids_by_image: Dict[str, List[str]] = {}
            for entry in meta["annotations"]:
                ids_by_image.setdefault(entry["image_id"], []).append(entry["id"])
            position: Dict[str, int] = {}
            renamed: List[Annotation] = []
            for ann in annotations:
                n = position.get(ann.image_id, 0)
                position[ann.image_id] = n + 1
                stored = ids_by_image.get(ann.image_id, [])
                if n >= len(stored):
                    raise DataError(
                        f"{sidecar}: annotation list disagrees with XML for "
                        f"image '{ann.image_id}'"
                    )
                renamed.append(replace(ann, id=stored[n]))
            for image_id, stored in ids_by_image.items():
                if position.get(image_id, 0) != len(stored):
                    raise DataError(
                        f"{sidecar}: annotation list disagrees with XML for "
                        f"image '{image_id}'"
                    )
            annotations = renamed
        raw = meta.get("kshot")
        if raw is not None:
            kshot = KShotSelection(
                k=int(raw["k"]),
                per_class={
                    name: tuple(ids) for name, ids in raw["per_class"].items()
                },
            )
    return DatasetManifest(
        images=tuple(images),
        annotations=tuple(annotations),
        splits=splits,
        seed=seed,
        kshot=kshot,
        root=root,
    )


def save_voc(manifest: DatasetManifest, out_root) -> DatasetManifest:
    """Write the manifest as a VOC-style directory plus manifest.json.

    Box coordinates are written as integers (they are integral for both
    loaded and synthesized datasets). Returns the manifest re-rooted at
    the output directory with the pixel store flushed to files.
    """
    out_root = Path(out_root)
    ann_dir = out_root / "Annotations"
    img_dir = out_root / "JPEGImages"
    ann_dir.mkdir(parents=True, exist_ok=True)
    img_dir.mkdir(parents=True, exist_ok=True)

    new_images: List[ImageRecord] = []
    for rec in manifest.images:
        basename = Path(rec.file).name
        dest = img_dir / basename
        stored = manifest.pixels.get(rec.id)
        if stored is not None:
            Image.fromarray(np.ascontiguousarray(stored)).save(dest)
        else:
            if manifest.root is None:
                raise DataError(f"image '{rec.id}' has no pixels and no source root")
            src = manifest.root / rec.file
            if not src.exists():
                raise DataError(f"image file missing: {src}")
            if src.resolve() != dest.resolve():
                shutil.copyfile(src, dest)
        new_images.append(replace(rec, file=f"JPEGImages/{basename}"))

        top = ET.Element("annotation")
        ET.SubElement(top, "folder").text = "JPEGImages"
        ET.SubElement(top, "filename").text = basename
        size = ET.SubElement(top, "size")
        ET.SubElement(size, "width").text = str(rec.width)
        ET.SubElement(size, "height").text = str(rec.height)
        ET.SubElement(size, "depth").text = "3"
        for ann in manifest.annotations_for(rec.id):
            obj = ET.SubElement(top, "object")
            ET.SubElement(obj, "name").text = ann.label.name
            ET.SubElement(obj, "difficult").text = "1" if ann.difficult else "0"
            bnd = ET.SubElement(obj, "bndbox")
            x0, y0, x1, y1 = ann.box.as_tuple()
            for tag, value in zip(("xmin", "ymin", "xmax", "ymax"), (x0, y0, x1, y1)):
                ET.SubElement(bnd, tag).text = str(int(round(value)))
        ET.indent(top)
        ET.ElementTree(top).write(ann_dir / f"{rec.id}.xml", encoding="unicode")

    written = DatasetManifest(
        images=tuple(new_images),
        annotations=manifest.annotations,
        splits=dict(manifest.splits),
        seed=manifest.seed,
        kshot=manifest.kshot,
        root=out_root,
    )
    save_manifest(written, out_root / "manifest.json")
    return written


# ---------------------------------------------------------------------------
# JSON manifest and COCO export


def manifest_to_dict(manifest: DatasetManifest) -> Dict:
    kshot = None
    if manifest.kshot is not None:
        kshot = {
            "k": manifest.kshot.k,
            "per_class": {
                name: list(ids)
                for name, ids in sorted(manifest.kshot.per_class.items())
            },
        }
    return {
        "schema": MANIFEST_SCHEMA,
        "seed": manifest.seed,
        "splits": dict(sorted(manifest.splits.items())),
        "kshot": kshot,
        "images": [
            {"id": r.id, "file": r.file, "width": r.width, "height": r.height}
            for r in manifest.images
        ],
        "annotations": [
            {
                "id": a.id,
                "image_id": a.image_id,
                "class": a.label.name,
                "box": list(a.box.as_tuple()),
                "difficult": a.difficult,
            }
            for a in manifest.annotations
        ],
    }


def manifest_from_dict(data: Mapping, root=None) -> DatasetManifest:
    if data.get("schema") != MANIFEST_SCHEMA:
        raise DataError(f"schema '{data.get('schema')}' is not {MANIFEST_SCHEMA}")
    splits = dict(data["splits"])
    images = tuple(
        ImageRecord(id=r["id"], file=r["file"], width=r["width"], height=r["height"])
        for r in data["images"]
    )
    annotations = []
    for a in data["annotations"]:
        name = a["class"]
        split = splits.get(name)
        if split is None:
            raise DataError(f"annotation '{a['id']}': class '{name}' not in splits")
        annotations.append(
            Annotation(
                id=a["id"],
                image_id=a["image_id"],
                box=BBox(*a["box"]),
                label=ClassLabel(name=name, split=split),
                difficult=bool(a.get("difficult", False)),
            )
        )
    kshot = None
    raw = data.get("kshot")
    if raw is not None:
        kshot = KShotSelection(
            k=int(raw["k"]),
            per_class={name: tuple(ids) for name, ids in raw["per_class"].items()},
        )
    return DatasetManifest(
        images=images,
        annotations=tuple(annotations),
        splits=splits,
        seed=int(data.get("seed", 0)),
        kshot=kshot,
        root=root,
    )


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest_to_dict(manifest), indent=2) + "\n")


def load_manifest(path, root=None) -> DatasetManifest:
    path = Path(path)
    data = json.loads(path.read_text())
    return manifest_from_dict(data, root=root if root is not None else path.parent)


def coco_category_ids(manifest: DatasetManifest) -> Dict[str, int]:
    """Category numbering used by the COCO export: sorted names, 1-based."""
    return {name: i + 1 for i, name in enumerate(manifest.class_names())}


def coco_image_ids(manifest: DatasetManifest) -> Dict[str, int]:
    """Image numbering used by the COCO export: sorted ids, 1-based."""
    return {rec.id: i + 1 for i, rec in enumerate(manifest.images)}


def export_coco(manifest: DatasetManifest, path) -> Dict:
    cat_ids = coco_category_ids(manifest)
    img_ids = coco_image_ids(manifest)
    data = {
        "images": [
            {
                "id": img_ids[r.id],
                "file_name": Path(r.file).name,
                "width": r.width,
                "height": r.height,
            }
            for r in manifest.images
        ],
        "annotations": [
            {
                "id": i + 1,
                "image_id": img_ids[a.image_id],
                "category_id": cat_ids[a.label.name],
                "bbox": [a.box.x_min, a.box.y_min, a.box.width, a.box.height],
                "area": a.box.area,
                "iscrowd": 0,
                "difficult": a.difficult,
            }
            for i, a in enumerate(manifest.annotations)
        ],
        "categories": [
            {"id": cid, "name": name, "supercategory": manifest.splits[name]}
            for name, cid in sorted(cat_ids.items(), key=lambda kv: kv[1])
        ],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2) + "\n")
    return data


# ---------------------------------------------------------------------------
# K-shot sampling and reference extraction


def sample_kshot(
    manifest: DatasetManifest,
    novel_classes: Sequence[str],
    k: int,
    seed: int,
) -> DatasetManifest:
    """Select exactly k instances per novel class by a seeded uniform draw.

    Selection is keyed on sorted annotation ids, so it is stable under
    any permutation of manifest record order.
    """
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    per_class: Dict[str, Tuple[str, ...]] = {}
    for name in novel_classes:
        if manifest.splits.get(name) != "novel":
            raise DataError(f"class '{name}' is not a novel class")
        ids = sorted(a.id for a in manifest.instances_of(name))
        if len(ids) < k:
            raise DataError(
                f"class '{name}' has {len(ids)} instances, cannot sample k={k}"
            )
        rng = rng_for(seed, "kshot", name)
        chosen = rng.choice(len(ids), size=k, replace=False)
        per_class[name] = tuple(sorted(ids[i] for i in chosen))
    return replace(
        manifest, kshot=KShotSelection(k=k, per_class=per_class), seed=seed
    )


def extract_references(manifest: DatasetManifest) -> List[ReferenceInstance]:
    """One reference per selected K-shot annotation: the image crop at the
    box, with a full-rectangle mask (box-level supervision)."""
    if manifest.kshot is None:
        raise DataError("manifest has no K-shot selection")
    refs: List[ReferenceInstance] = []
    for name in sorted(manifest.kshot.per_class):
        for ann_id in manifest.kshot.per_class[name]:
            ann = manifest.annotation(ann_id)
            rec = manifest.image(ann.image_id)
            pixels = load_image(manifest, ann.image_id)
            x0, y0, x1, y1 = pixel_bounds(ann.box)
            x0, y0 = max(x0, 0), max(y0, 0)
            x1, y1 = min(x1, rec.width), min(y1, rec.height)
            if x1 - x0 < 1 or y1 - y0 < 1:
                raise DataError(
                    f"annotation '{ann_id}': crop degenerate after clamping "
                    f"({x0},{y0},{x1},{y1})"
                )
            crop = np.ascontiguousarray(pixels[y0:y1, x0:x1])
            mask = np.ones(crop.shape[:2], dtype=bool)
            refs.append(
                ReferenceInstance(
                    pixels=crop,
                    mask=mask,
                    label=ann.label,
                    source=(ann.image_id, ann.box),
                )
            )
    return refs


def kshot_manifest(manifest: DatasetManifest) -> DatasetManifest:
    """Restrict a manifest to its K-shot selection: only selected
    annotations survive, and only images that carry at least one of them.
    Unselected instances in kept images are dropped, not marked; consumers
    decide their own ignore-region policy."""
    if manifest.kshot is None:
        raise DataError("manifest has no K-shot selection")
    selected = {
        ann_id
        for ids in manifest.kshot.per_class.values()
        for ann_id in ids
    }
    annotations = tuple(a for a in manifest.annotations if a.id in selected)
    image_ids = {a.image_id for a in annotations}
    images = tuple(r for r in manifest.images if r.id in image_ids)
    pixels = {k: v for k, v in manifest.pixels.items() if k in image_ids}
    return DatasetManifest(
        images=images,
        annotations=annotations,
        splits=dict(manifest.splits),
        seed=manifest.seed,
        kshot=manifest.kshot,
        root=manifest.root,
        pixels=pixels,
    )


def merge(a: DatasetManifest, b: DatasetManifest) -> DatasetManifest:
    """Union of two manifests with disjoint image ids."""
    collisions = {r.id for r in a.images} & {r.id for r in b.images}
    if collisions:
        raise DataError(f"image id collision: {sorted(collisions)[:5]}")
    splits = dict(a.splits)
    for name, split in b.splits.items():
        if splits.setdefault(name, split) != split:
            raise DataError(f"class '{name}': conflicting splits in merge")
    if a.root is not None and b.root is not None and Path(a.root) != Path(b.root):
        raise DataError("cannot merge manifests rooted at different directories")
    pixels = dict(a.pixels)
    pixels.update(b.pixels)
    return DatasetManifest(
        images=a.images + b.images,
        annotations=a.annotations + b.annotations,
        splits=splits,
        seed=a.seed,
        kshot=a.kshot if a.kshot is not None else b.kshot,
        root=a.root if a.root is not None else b.root,
        pixels=pixels,
    )
