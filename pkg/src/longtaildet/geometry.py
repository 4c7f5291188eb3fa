"""Bounding-box arithmetic: IoU, center distance, diagonal norm, greedy NMS.

Boxes are continuous corner-form (x1, y1, x2, y2) with x1 < x2 and y1 < y2.
Annotation files store (x, y, w, h) and are converted at ingestion.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box with optional score and class id."""

    x1: float
    y1: float
    x2: float
    y2: float
    score: Optional[float] = None
    class_id: Optional[int] = None

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(
                f"degenerate box: ({self.x1}, {self.y1}, {self.x2}, {self.y2})"
            )
        if self.score is not None and not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score {self.score} outside [0, 1]")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def with_score(self, score: float) -> "BBox":
        return replace(self, score=score)

    def corners(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


def boxes_to_array(boxes: Sequence[BBox]) -> np.ndarray:
    """Stack boxes into an (N, 4) float64 array of corners."""
    if len(boxes) == 0:
        return np.zeros((0, 4), dtype=np.float64)
    return np.array([b.corners() for b in boxes], dtype=np.float64)


def iou(a: BBox, b: BBox) -> float:
    """Intersection-over-union of two boxes, in [0, 1]."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) corner-form arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0.0, None) * np.clip(iy, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union


def center_distance(s: BBox, t: BBox) -> float:
    """Euclidean distance between box centers."""
    (sx, sy), (tx, ty) = s.center, t.center
    return float(np.hypot(sx - tx, sy - ty))


def diag_norm(t: BBox) -> float:
    """Length of the box's (width, height) vector."""
    return float(np.hypot(t.width, t.height))


def nms(dets: Sequence[BBox], iou_thresh: float) -> list[BBox]:
    """Greedy non-maximum suppression in descending score order.

    Ties break by (score desc, input index asc) so the kept set is
    deterministic across platforms.
    """
    if not (0.0 <= iou_thresh <= 1.0):
        raise ValueError(f"iou_thresh {iou_thresh} outside [0, 1]")
    for d in dets:
        if d.score is None:
            raise ValueError("nms requires scored boxes")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    arr = boxes_to_array(dets)
    kept: list[int] = []
    for i in order:
        if all(iou_matrix(arr[i : i + 1], arr[j : j + 1])[0, 0] <= iou_thresh for j in kept):
            kept.append(i)
    return [dets[i] for i in kept]
