"""Mix-up, duck-fill compositing, and photometric augmentation.

Rasters are (H, W, 3) uint8 numpy arrays. Every operation is deterministic
given (inputs, seed, config): resizing is plain bilinear, pixel rounding is
round-half-up, blending happens in float64 before the final rounding.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from PIL import Image

from .dataset import Dataset
from .geometry import BBox, iou

log = logging.getLogger(__name__)


def round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(round_half_up(x), 0, 255).astype(np.uint8)


def check_raster(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError(f"expected (H, W, 3) uint8 raster, got {img.shape} {img.dtype}")
    return img


def load_image(path: str | Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"))


def save_image(img: np.ndarray, path: str | Path) -> None:
    Image.fromarray(check_raster(img)).save(path)


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers and round-half-up output."""
    img = check_raster(img)
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    f = img.astype(np.float64)
    top = f[y0][:, x0] * (1 - fx) + f[y0][:, x1] * fx
    bot = f[y1][:, x0] * (1 - fx) + f[y1][:, x1] * fx
    return to_uint8(top * (1 - fy) + bot * fy)


@dataclass(frozen=True)
class TaggedBox:
    """Annotation produced by an augmentation, with provenance."""

    bbox: BBox
    class_id: int
    weight: float                      # mix lambda or paste alpha
    source_image_id: Optional[int] = None


@dataclass(frozen=True)
class Patch:
    pixels: np.ndarray                 # (h, w, 3) uint8 crop
    class_id: int
    source_image_id: int


@dataclass
class PatchBank:
    patches: list[Patch]

    def __len__(self) -> int:
        return len(self.patches)


@dataclass
class DuckFillConfig:
    pastes_per_image: tuple[int, int] = (1, 3)      # inclusive count range
    scale_range: tuple[float, float] = (0.8, 1.2)
    alpha_range: tuple[float, float] = (0.6, 1.0)
    max_overlap_iou: float = 0.2
    max_attempts: int = 20

    def __post_init__(self):
        lo, hi = self.pastes_per_image
        if lo < 0 or hi < lo:
            raise ValueError("pastes_per_image range must be ordered and non-negative")
        if not (0 < self.scale_range[0] <= self.scale_range[1]):
            raise ValueError("scale_range must be positive and ordered")
        if not (0 < self.alpha_range[0] <= self.alpha_range[1] <= 1):
            raise ValueError("alpha_range must lie in (0, 1] and be ordered")
        if not (0 <= self.max_overlap_iou <= 1):
            raise ValueError("max_overlap_iou must be in [0, 1]")


@dataclass
class DuckFillResult:
    image: np.ndarray
    annotations: list[TaggedBox]
    skipped: int = 0                   # patches dropped (too large / no placement)


@dataclass
class PhotometricConfig:
    brightness_range: tuple[float, float] = (-32.0, 32.0)
    contrast_range: tuple[float, float] = (0.8, 1.2)
    shuffle_channels: bool = True


def mixup(img_a: np.ndarray, anns_a: Sequence[TaggedBox],
          img_b: np.ndarray, anns_b: Sequence[TaggedBox],
          beta_param: float = 1.5, rng_seed: int = 0,
          lam: Optional[float] = None) -> tuple[np.ndarray, list[TaggedBox], float]:
    """Blend two same-size images with a Beta-distributed coefficient.

    Output pixel = round_half_up(lam * a + (1 - lam) * b); annotations are
    the union of both sets, each tagged with its source weight. Pass ``lam``
    to force the coefficient (e.g. for identity checks).
    """
    img_a, img_b = check_raster(img_a), check_raster(img_b)
    if img_a.shape != img_b.shape:
        raise ValueError(f"dimension mismatch: {img_a.shape} vs {img_b.shape}")
    if lam is None:
        lam = float(np.random.default_rng(rng_seed).beta(beta_param, beta_param))
    out = to_uint8(lam * img_a.astype(np.float64) + (1 - lam) * img_b.astype(np.float64))
    tagged = ([TaggedBox(t.bbox, t.class_id, lam, t.source_image_id) for t in anns_a]
              + [TaggedBox(t.bbox, t.class_id, 1 - lam, t.source_image_id) for t in anns_b])
    return out, tagged, lam


def extract_patches(ds: Dataset, few_classes: set[int],
                    image_loader: Callable[[int], np.ndarray]) -> PatchBank:
    """Crop every few-shot annotation into a patch bank.

    ``image_loader`` maps image id to its raster; unreadable images are
    skipped with a warning.
    """
    patches: list[Patch] = []
    failed = 0
    for im in ds.images:
        anns = [a for a in ds.annotations_of(im.id) if a.class_id in few_classes]
        if not anns:
            continue
        try:
            img = check_raster(image_loader(im.id))
        except Exception:
            failed += 1
            log.warning("skipping unreadable image %d", im.id)
            continue
        h, w = img.shape[:2]
        for a in anns:
            x1 = int(np.floor(max(0.0, a.bbox.x1)))
            y1 = int(np.floor(max(0.0, a.bbox.y1)))
            x2 = int(np.ceil(min(float(w), a.bbox.x2)))
            y2 = int(np.ceil(min(float(h), a.bbox.y2)))
            if x2 > x1 and y2 > y1:
                patches.append(Patch(img[y1:y2, x1:x2].copy(), a.class_id, im.id))
    if failed:
        log.warning("%d images unreadable while extracting patches", failed)
    return PatchBank(patches=patches)


def duck_fill(target: np.ndarray, bank: PatchBank, cfg: DuckFillConfig,
              rng_seed: int) -> DuckFillResult:
    """Paste rescaled few-shot patches into an unannotated image.

    Placements are rejection-sampled so pairwise paste IoU stays at or below
    cfg.max_overlap_iou; a paste with no valid placement after
    cfg.max_attempts tries is dropped, never an error.
    """
    if len(bank) == 0:
        raise ValueError("empty patch bank")
    target = check_raster(target)
    out = target.copy()
    th, tw = out.shape[:2]
    rng = np.random.default_rng(rng_seed)
    lo, hi = cfg.pastes_per_image
    k = int(rng.integers(lo, hi + 1))
    placed: list[BBox] = []
    anns: list[TaggedBox] = []
    skipped = 0
    for _ in range(k):
        patch = bank.patches[int(rng.integers(len(bank)))]
        scale = float(rng.uniform(*cfg.scale_range))
        ph = max(1, int(round_half_up(patch.pixels.shape[0] * scale)))
        pw = max(1, int(round_half_up(patch.pixels.shape[1] * scale)))
        if ph > th or pw > tw:
            skipped += 1
            log.debug("patch too large after rescale (%dx%d into %dx%d)", pw, ph, tw, th)
            continue
        resized = bilinear_resize(patch.pixels, ph, pw)
        box = None
        for _ in range(cfg.max_attempts):
            x = int(rng.integers(0, tw - pw + 1))
            y = int(rng.integers(0, th - ph + 1))
            cand = BBox(float(x), float(y), float(x + pw), float(y + ph))
            if all(iou(cand, p) <= cfg.max_overlap_iou for p in placed):
                box = cand
                break
        if box is None:
            skipped += 1
            continue
        alpha = float(rng.uniform(*cfg.alpha_range))
        x, y = int(box.x1), int(box.y1)
        region = out[y:y + ph, x:x + pw].astype(np.float64)
        out[y:y + ph, x:x + pw] = to_uint8(
            alpha * resized.astype(np.float64) + (1 - alpha) * region)
        placed.append(box)
        anns.append(TaggedBox(box, patch.class_id, alpha, patch.source_image_id))
    return DuckFillResult(image=out, annotations=anns, skipped=skipped)


def apply_photometric(img: np.ndarray, permutation: Sequence[int],
                      contrast: float, brightness: float) -> np.ndarray:
    """Channel permutation followed by clamp(contrast * p + brightness)."""
    img = check_raster(img)
    perm = list(permutation)
    if sorted(perm) != [0, 1, 2]:
        raise ValueError(f"bad channel permutation {perm}")
    out = img[:, :, perm].astype(np.float64)
    return to_uint8(contrast * out + brightness)


def photometric(img: np.ndarray, rng_seed: int,
                cfg: PhotometricConfig | None = None) -> np.ndarray:
    """Seeded channel shuffle plus random brightness/contrast."""
    cfg = cfg or PhotometricConfig()
    rng = np.random.default_rng(rng_seed)
    perm = rng.permutation(3).tolist() if cfg.shuffle_channels else [0, 1, 2]
    contrast = float(rng.uniform(*cfg.contrast_range))
    brightness = float(rng.uniform(*cfg.brightness_range))
    return apply_photometric(img, perm, contrast, brightness)
