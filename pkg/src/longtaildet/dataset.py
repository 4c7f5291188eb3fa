"""COCO-style annotation ingestion, class statistics, and staged training plans.

The annotation schema is a COCO-compatible subset: top-level ``images``
(id, width, height, file_name), ``annotations`` (id, image_id, category_id,
bbox as [x, y, w, h]) and ``categories`` (id, name). Out-of-bounds boxes are
clamped with a warning count; zero-area boxes are dropped.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .geometry import BBox

log = logging.getLogger(__name__)


class DatasetError(Exception):
    """Raised when an annotation file fails to parse or validate."""


@dataclass(frozen=True)
class ImageInfo:
    id: int
    width: int
    height: int
    file_name: str


@dataclass(frozen=True)
class Annotation:
    id: int
    image_id: int
    class_id: int
    bbox: BBox


@dataclass(frozen=True)
class Category:
    id: int
    name: str


@dataclass
class Dataset:
    images: list[ImageInfo]
    annotations: list[Annotation]
    categories: list[Category]
    clamped_boxes: int = 0
    dropped_boxes: int = 0
    _by_image: dict[int, list[Annotation]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        image_ids = [im.id for im in self.images]
        if len(set(image_ids)) != len(image_ids):
            raise DatasetError("duplicate image ids")
        cat_ids = {c.id for c in self.categories}
        img_set = set(image_ids)
        bad = [a.id for a in self.annotations
               if a.image_id not in img_set or a.class_id not in cat_ids]
        if bad:
            raise DatasetError(f"annotations with dangling references: {bad}")
        self._by_image = {im.id: [] for im in self.images}
        for a in self.annotations:
            self._by_image[a.image_id].append(a)

    def annotations_of(self, image_id: int) -> list[Annotation]:
        return self._by_image[image_id]

    def image(self, image_id: int) -> ImageInfo:
        for im in self.images:
            if im.id == image_id:
                return im
        raise KeyError(image_id)


@dataclass
class StagedPlan:
    """Three-stage training plan: many-shot first, few-shot fine-tune, then both."""

    few_classes: set[int]
    many_classes: set[int]
    stage_t1: list[int]
    stage_t2: list[int]
    stage_t3: list[int]
    notes: str


def load_dataset(path: str | Path) -> Dataset:
    """Load and validate an annotation file.

    Out-of-bounds boxes are clamped to their image (counted in
    ``clamped_boxes``); boxes with zero area after clamping are dropped
    (counted in ``dropped_boxes``).
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DatasetError(f"{path}: not valid JSON ({e})") from e

    for key in ("images", "annotations", "categories"):
        if key not in raw:
            raise DatasetError(f"{path}: missing top-level key '{key}'")

    try:
        images = [ImageInfo(int(d["id"]), int(d["width"]), int(d["height"]),
                            str(d["file_name"])) for d in raw["images"]]
        categories = [Category(int(d["id"]), str(d["name"])) for d in raw["categories"]]
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetError(f"{path}: malformed images/categories entry ({e})") from e

    img_bounds = {im.id: (im.width, im.height) for im in images}
    annotations: list[Annotation] = []
    clamped = dropped = 0
    for d in raw["annotations"]:
        try:
            ann_id = int(d["id"])
            image_id = int(d["image_id"])
            class_id = int(d["category_id"])
            x, y, w, h = (float(v) for v in d["bbox"])
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetError(f"{path}: malformed annotation ({e})") from e
        x1, y1, x2, y2 = x, y, x + w, y + h
        if image_id in img_bounds:
            iw, ih = img_bounds[image_id]
            cx1, cy1 = max(0.0, min(x1, iw)), max(0.0, min(y1, ih))
            cx2, cy2 = max(0.0, min(x2, iw)), max(0.0, min(y2, ih))
            if (cx1, cy1, cx2, cy2) != (x1, y1, x2, y2):
                clamped += 1
            x1, y1, x2, y2 = cx1, cy1, cx2, cy2
        if x2 <= x1 or y2 <= y1:
            dropped += 1
            log.warning("dropping zero-area box (annotation id %d)", ann_id)
            continue
        annotations.append(Annotation(ann_id, image_id, class_id,
                                      BBox(x1, y1, x2, y2, class_id=class_id)))
    if clamped:
        log.warning("clamped %d out-of-bounds boxes", clamped)
    return Dataset(images, annotations, categories,
                   clamped_boxes=clamped, dropped_boxes=dropped)


def save_dataset(ds: Dataset, path: str | Path, extra_ann_fields: dict | None = None) -> None:
    """Write a Dataset back to the annotation schema.

    ``extra_ann_fields`` maps annotation id to a dict of provenance keys
    (e.g. source_image_id, paste_alpha, mix_lambda) merged into that entry.
    """
    doc = {
        "images": [{"id": im.id, "width": im.width, "height": im.height,
                    "file_name": im.file_name} for im in ds.images],
        "annotations": [],
        "categories": [{"id": c.id, "name": c.name} for c in ds.categories],
    }
    for a in ds.annotations:
        entry = {"id": a.id, "image_id": a.image_id, "category_id": a.class_id,
                 "bbox": [a.bbox.x1, a.bbox.y1, a.bbox.width, a.bbox.height]}
        if extra_ann_fields and a.id in extra_ann_fields:
            entry.update(extra_ann_fields[a.id])
        doc["annotations"].append(entry)
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n",
                          encoding="utf-8")


def class_counts(ds: Dataset) -> dict[int, int]:
    """Number of boxes per category; categories with no boxes report 0."""
    counts = {c.id: 0 for c in ds.categories}
    for a in ds.annotations:
        counts[a.class_id] += 1
    return counts


def split_shot(counts: dict[int, int], threshold: int = 200) -> tuple[set[int], set[int]]:
    """Split classes into (many, few) at a strict box-count threshold.

    A class is few-shot when it has strictly fewer than ``threshold`` boxes.
    """
    if threshold < 1:
        raise ValueError("threshold must be >= 1")
    few = {c for c, n in counts.items() if n < threshold}
    many = set(counts) - few
    return many, few


def stage_plan(ds: Dataset, threshold: int = 200) -> StagedPlan:
    """Build the three-stage plan: T1 many-shot images, T2 few-shot images, T3 union.

    An image belongs to a stage when it contains at least one box of that
    stage's class subset; all annotations are kept in every stage's images,
    the plan records the class subsets. The intended model handoff is
    recorded as text only.
    """
    many, few = split_shot(class_counts(ds), threshold)
    t1, t2 = [], []
    for im in ds.images:
        classes = {a.class_id for a in ds.annotations_of(im.id)}
        if classes & many:
            t1.append(im.id)
        if classes & few:
            t2.append(im.id)
    t3 = sorted(set(t1) | set(t2))
    notes = ("T1: train on many-shot images -> model M1; "
             "T2: fine-tune M1 on few-shot images -> model M2; "
             "T3: fine-tune M2 on the union -> final model.")
    return StagedPlan(few_classes=few, many_classes=many,
                      stage_t1=sorted(t1), stage_t2=sorted(t2), stage_t3=t3,
                      notes=notes)


def annotated_image_ids(ds: Dataset) -> list[int]:
    return [im.id for im in ds.images if ds.annotations_of(im.id)]


def unannotated_image_ids(ds: Dataset) -> list[int]:
    return [im.id for im in ds.images if not ds.annotations_of(im.id)]
