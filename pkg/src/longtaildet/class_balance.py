"""Class-balance image sampling.

Each annotated image gets weight W = 1 / S, where S is the number of
instances, within that image, of its rarest class (the present class with
the smallest dataset-wide box count; ties break to the lower class id).
Epochs are built by drawing images with replacement in proportion to W.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import Dataset, class_counts


class NoAnnotationsError(Exception):
    """Image (or whole dataset) has no annotations to weight by."""


@dataclass
class SampleWeights:
    weights: dict[int, float]
    rarest_class: dict[int, int]
    normalization: float

    def probabilities(self) -> dict[int, float]:
        return {i: w / self.normalization for i, w in self.weights.items()}


def rarest_class(image_id: int, ds: Dataset, global_counts: dict[int, int]) -> int:
    """Class present in the image with the smallest global count."""
    anns = ds.annotations_of(image_id)
    if not anns:
        raise NoAnnotationsError(f"image {image_id} has no annotations")
    present = sorted({a.class_id for a in anns})
    return min(present, key=lambda c: (global_counts[c], c))


def image_weight(image_id: int, ds: Dataset, global_counts: dict[int, int]) -> float:
    """W = 1 / (instances of the image's rarest class inside the image)."""
    c = rarest_class(image_id, ds, global_counts)
    s = sum(1 for a in ds.annotations_of(image_id) if a.class_id == c)
    return 1.0 / s


def compute_weights(ds: Dataset) -> SampleWeights:
    """Weights for every annotated image; unannotated images are excluded."""
    counts = class_counts(ds)
    weights, rarest = {}, {}
    for im in ds.images:
        if not ds.annotations_of(im.id):
            continue
        rarest[im.id] = rarest_class(im.id, ds, counts)
        weights[im.id] = image_weight(im.id, ds, counts)
    if not weights:
        raise NoAnnotationsError("no annotated images to sample from")
    return SampleWeights(weights=weights, rarest_class=rarest,
                         normalization=sum(weights.values()))


def sample_epoch(ds: Dataset, rng_seed: int, n_draws: int) -> list[int]:
    """Draw n_draws image ids i.i.d. with replacement under normalized W."""
    sw = compute_weights(ds)
    ids = np.array(sorted(sw.weights), dtype=np.int64)
    p = np.array([sw.weights[i] for i in ids], dtype=np.float64)
    p /= p.sum()
    rng = np.random.default_rng(rng_seed)
    return rng.choice(ids, size=n_draws, replace=True, p=p).tolist()
