"""Grid anchor generation and the hard-IoU-imbalance sampler.

Negatives are constrained to ring the annotated targets: an anchor is a
negative candidate only when its max IoU with any target is below 0.3
(strict) AND its center lies closer to the nearest target's center than
that target's (width, height) diagonal (strict). Negatives with IoU above
0.05 are "hard" and get a boosted share of the sampled batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import BBox, boxes_to_array, iou_matrix

POSITIVE = "positive"
NEGATIVE_HARD = "negative_hard"
NEGATIVE_EASY = "negative_easy"
EXCLUDED = "excluded"


@dataclass
class AnchorGridConfig:
    image_size: tuple[int, int]                  # (W, H) pixels
    strides: list[int]
    scales: list[float]
    ratios: list[float]                          # height / width
    exclude_border: bool = False                 # drop anchors extending past the image

    def __post_init__(self):
        if not self.scales or not self.ratios:
            raise ValueError("scales and ratios must be non-empty")
        if any(s <= 0 for s in self.strides) or list(self.strides) != sorted(self.strides):
            raise ValueError("strides must be positive ascending")
        if any(v <= 0 for v in self.scales) or any(v <= 0 for v in self.ratios):
            raise ValueError("scales and ratios must be positive")


@dataclass
class SamplerConfig:
    pos_iou_thresh: float = 0.7
    neg_iou_upper: float = 0.3
    hard_iou_lower: float = 0.05
    batch_size: int = 256
    pos_fraction: float = 0.25
    hard_neg_fraction: float = 0.5

    def __post_init__(self):
        if not (0.0 <= self.hard_iou_lower < self.neg_iou_upper
                <= self.pos_iou_thresh <= 1.0):
            raise ValueError("need 0 <= hard_iou_lower < neg_iou_upper "
                             "<= pos_iou_thresh <= 1")


@dataclass
class CandidateLabel:
    anchor: BBox
    max_iou: float
    nearest_target_distance: float
    nearest_target_diag: float
    status: str


@dataclass
class SampleBatch:
    positives: list[CandidateLabel]
    negatives: list[CandidateLabel]
    diagnostics: dict = field(default_factory=dict)


def generate_anchors(cfg: AnchorGridConfig) -> list[BBox]:
    """One anchor per (grid cell, scale, ratio) per stride, on cell centers.

    Anchors may extend past the image unless cfg.exclude_border is set.
    """
    w, h = cfg.image_size
    out: list[BBox] = []
    for s in cfg.strides:
        nx, ny = math.ceil(w / s), math.ceil(h / s)
        for iy in range(ny):
            for ix in range(nx):
                cx, cy = (ix + 0.5) * s, (iy + 0.5) * s
                for scale in cfg.scales:
                    for ratio in cfg.ratios:
                        aw = s * scale / math.sqrt(ratio)
                        ah = s * scale * math.sqrt(ratio)
                        box = BBox(cx - aw / 2, cy - ah / 2, cx + aw / 2, cy + ah / 2)
                        if cfg.exclude_border and (
                                box.x1 < 0 or box.y1 < 0 or box.x2 > w or box.y2 > h):
                            continue
                        out.append(box)
    return out


def border_mask(anchors: list[BBox], image_size: tuple[int, int]) -> np.ndarray:
    """True where the anchor lies fully inside the image."""
    w, h = image_size
    return np.array([a.x1 >= 0 and a.y1 >= 0 and a.x2 <= w and a.y2 <= h
                     for a in anchors], dtype=bool)


def classify_candidates(anchors: list[BBox], targets: list[BBox],
                        cfg: SamplerConfig) -> list[CandidateLabel]:
    """Label every anchor positive / negative_hard / negative_easy / excluded."""
    if not targets:
        return [CandidateLabel(a, 0.0, math.inf, 0.0, EXCLUDED) for a in anchors]
    aarr, tarr = boxes_to_array(anchors), boxes_to_array(targets)
    ious = iou_matrix(aarr, tarr)
    max_iou = ious.max(axis=1)

    acx = 0.5 * (aarr[:, 0] + aarr[:, 2])
    acy = 0.5 * (aarr[:, 1] + aarr[:, 3])
    tcx = 0.5 * (tarr[:, 0] + tarr[:, 2])
    tcy = 0.5 * (tarr[:, 1] + tarr[:, 3])
    dist = np.hypot(acx[:, None] - tcx[None, :], acy[:, None] - tcy[None, :])
    nearest = dist.argmin(axis=1)
    ndist = dist[np.arange(len(anchors)), nearest]
    diags = np.hypot(tarr[:, 2] - tarr[:, 0], tarr[:, 3] - tarr[:, 1])
    ndiag = diags[nearest]

    out = []
    for i, a in enumerate(anchors):
        mi, d, dg = float(max_iou[i]), float(ndist[i]), float(ndiag[i])
        if mi >= cfg.pos_iou_thresh:
            status = POSITIVE
        elif mi < cfg.neg_iou_upper and d < dg:
            status = NEGATIVE_HARD if mi > cfg.hard_iou_lower else NEGATIVE_EASY
        else:
            status = EXCLUDED
        out.append(CandidateLabel(a, mi, d, dg, status))
    return out


def sample_batch(candidates: list[CandidateLabel], cfg: SamplerConfig,
                 rng_seed: int) -> SampleBatch:
    """Sample a training batch with a boosted hard-negative share.

    Up to batch_size * pos_fraction positives are drawn uniformly; the
    remaining quota is filled with negatives, a hard_neg_fraction share from
    the hard pool. Short pools fall back on the other negative pool. An empty
    candidate set yields an empty batch with diagnostics, not an error.
    """
    rng = np.random.default_rng(rng_seed)
    pos_pool = [c for c in candidates if c.status == POSITIVE]
    hard_pool = [c for c in candidates if c.status == NEGATIVE_HARD]
    easy_pool = [c for c in candidates if c.status == NEGATIVE_EASY]

    def draw(pool, k):
        if k <= 0 or not pool:
            return []
        idx = rng.choice(len(pool), size=min(k, len(pool)), replace=False)
        return [pool[i] for i in sorted(idx)]

    n_pos = min(int(cfg.batch_size * cfg.pos_fraction), len(pos_pool))
    positives = draw(pos_pool, n_pos)

    neg_quota = cfg.batch_size - len(positives)
    # stochastic rounding keeps the expected hard share at hard_neg_fraction
    # even when the quota times the fraction is not an integer
    exact = neg_quota * cfg.hard_neg_fraction
    want_hard = int(exact) + (1 if rng.random() < exact - int(exact) else 0)
    n_hard = min(want_hard, len(hard_pool))
    n_easy = min(neg_quota - n_hard, len(easy_pool))
    # backfill from hard if easy ran short
    n_hard = min(neg_quota - n_easy, len(hard_pool))
    hard = draw(hard_pool, n_hard)
    easy = draw(easy_pool, n_easy)
    negatives = hard + easy

    diag = {
        "pool_positive": len(pos_pool),
        "pool_negative_hard": len(hard_pool),
        "pool_negative_easy": len(easy_pool),
        "sampled_positive": len(positives),
        "sampled_negative_hard": len(hard),
        "sampled_negative_easy": len(easy),
        "realized_hard_share": len(hard) / len(negatives) if negatives else None,
    }
    return SampleBatch(positives=positives, negatives=negatives, diagnostics=diag)
