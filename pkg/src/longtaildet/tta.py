"""Test-time augmentation bookkeeping and detection fusion.

Transforms are (scale, horizontal flip, Gaussian blur). Box coordinates are
mapped into the transformed frame and back exactly; blur never moves boxes.
Detections from all transform branches are fused per class, by NMS or by
cluster averaging.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .augment import check_raster, to_uint8
from .geometry import BBox, iou, nms

# The paper's two operating input sizes give the default multi-scale set.
TRAIN_SIZES = ((1280, 720), (1394, 764))
DEFAULT_SCALES = (1.0, TRAIN_SIZES[1][0] / TRAIN_SIZES[0][0])


@dataclass(frozen=True)
class TTATransform:
    scale: float = 1.0
    hflip: bool = False
    blur_sigma: float = 0.0

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if self.blur_sigma < 0:
            raise ValueError("blur_sigma must be >= 0")


def default_transforms() -> list[TTATransform]:
    out = [TTATransform(scale=s, hflip=f)
           for s in DEFAULT_SCALES for f in (False, True)]
    out.append(TTATransform(blur_sigma=1.0))
    return out


@dataclass
class DetectionSet:
    frame: tuple[float, float]              # (W, H)
    boxes: list[BBox]


def clamp_to_frame(ds: DetectionSet) -> DetectionSet:
    w, h = ds.frame
    out = []
    for b in ds.boxes:
        x1, y1 = max(0.0, min(b.x1, w)), max(0.0, min(b.y1, h))
        x2, y2 = max(0.0, min(b.x2, w)), max(0.0, min(b.y2, h))
        if x2 > x1 and y2 > y1:
            out.append(replace(b, x1=x1, y1=y1, x2=x2, y2=y2))
    return DetectionSet(frame=ds.frame, boxes=out)


def forward_boxes(dets: DetectionSet, t: TTATransform) -> DetectionSet:
    """Map boxes from the original frame into the transformed frame."""
    w, h = dets.frame
    sw, sh = w * t.scale, h * t.scale
    out = []
    for b in dets.boxes:
        x1, y1, x2, y2 = (b.x1 * t.scale, b.y1 * t.scale,
                          b.x2 * t.scale, b.y2 * t.scale)
        if t.hflip:
            x1, x2 = sw - x2, sw - x1
        out.append(replace(b, x1=x1, y1=y1, x2=x2, y2=y2))
    return DetectionSet(frame=(sw, sh), boxes=out)


def invert_boxes(dets: DetectionSet, t: TTATransform) -> DetectionSet:
    """Exact inverse of forward_boxes; scores and classes untouched."""
    sw, sh = dets.frame
    out = []
    for b in dets.boxes:
        x1, y1, x2, y2 = b.x1, b.y1, b.x2, b.y2
        if t.hflip:
            x1, x2 = sw - x2, sw - x1
        out.append(replace(b, x1=x1 / t.scale, y1=y1 / t.scale,
                           x2=x2 / t.scale, y2=y2 / t.scale))
    return DetectionSet(frame=(sw / t.scale, sh / t.scale), boxes=out)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized sampled Gaussian, radius ceil(3*sigma)."""
    if sigma == 0:
        return np.array([1.0])
    r = math.ceil(3 * sigma)
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with edge-replicate padding; sigma 0 is identity."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    img = check_raster(img)
    if sigma == 0:
        return img.copy()
    k = gaussian_kernel(sigma)
    r = len(k) // 2
    f = img.astype(np.float64)
    padded = np.pad(f, ((r, r), (0, 0), (0, 0)), mode="edge")
    f = sum(k[i] * padded[i:i + f.shape[0]] for i in range(len(k)))
    padded = np.pad(f, ((0, 0), (r, r), (0, 0)), mode="edge")
    f = sum(k[i] * padded[:, i:i + f.shape[1]] for i in range(len(k)))
    return to_uint8(f)


def _cluster_average(boxes: list[BBox], iou_thresh: float) -> list[BBox]:
    """Greedy clustering in score order; merged box is the score-weighted
    coordinate average, merged score is the cluster max."""
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, i))
    used = [False] * len(boxes)
    merged = []
    for i in order:
        if used[i]:
            continue
        cluster = [boxes[i]]
        used[i] = True
        for j in order:
            if not used[j] and iou(boxes[i], boxes[j]) > iou_thresh:
                cluster.append(boxes[j])
                used[j] = True
        wsum = sum(b.score for b in cluster)
        x1 = sum(b.score * b.x1 for b in cluster) / wsum
        y1 = sum(b.score * b.y1 for b in cluster) / wsum
        x2 = sum(b.score * b.x2 for b in cluster) / wsum
        y2 = sum(b.score * b.y2 for b in cluster) / wsum
        merged.append(BBox(x1, y1, x2, y2,
                           score=max(b.score for b in cluster),
                           class_id=boxes[i].class_id))
    return merged


def fuse(sets: Sequence[DetectionSet], iou_thresh: float = 0.5,
         mode: str = "nms") -> DetectionSet:
    """Fuse mapped-back detections from several TTA branches.

    Per-class concatenation followed by NMS (mode="nms") or greedy
    cluster-average merging (mode="avg"). All sets must share a frame size.
    """
    if not sets:
        raise ValueError("need at least one detection set")
    if mode not in ("nms", "avg"):
        raise ValueError(f"unknown fuse mode '{mode}'")
    frame = sets[0].frame
    for s in sets[1:]:
        if s.frame != frame:
            raise ValueError(f"frame-size mismatch: {s.frame} vs {frame}")
    by_class: dict[int, list[BBox]] = {}
    for s in sets:
        for b in s.boxes:
            by_class.setdefault(b.class_id, []).append(b)
    fused: list[BBox] = []
    for cid in sorted(by_class, key=lambda c: (c is None, c)):
        group = by_class[cid]
        if mode == "nms":
            fused.extend(nms(group, iou_thresh))
        else:
            fused.extend(_cluster_average(group, iou_thresh))
    return DetectionSet(frame=frame, boxes=fused)


def load_detections(path: str | Path) -> DetectionSet:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    boxes = [BBox(*d["bbox"], score=d.get("score"), class_id=d.get("class_id"))
             for d in doc["boxes"]]
    return clamp_to_frame(DetectionSet(frame=tuple(doc["frame"]), boxes=boxes))


def save_detections(ds: DetectionSet, path: str | Path) -> None:
    doc = {"frame": list(ds.frame),
           "boxes": [{"bbox": list(b.corners()), "score": b.score,
                      "class_id": b.class_id} for b in ds.boxes]}
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n", encoding="utf-8")
