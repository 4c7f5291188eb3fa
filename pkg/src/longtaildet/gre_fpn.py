"""Multi-level RoI feature extraction with analytic gradients.

Two extraction paths over a feature pyramid:

* baseline: RoI-Align on the single level assigned by the RoI's scale;
* global: RoI-Align on every level, channel concatenation, then a learned
  1x1 convolution mixing the levels.

Everything runs in float64 so gradient checks against central finite
differences are reliable. No training loop is provided; the gradients exist
to verify the mixing weights are learnable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import BBox


@dataclass
class Pyramid:
    """Single-image feature stack: (1, C, H, W) float64 arrays with strides."""

    levels: list[tuple[np.ndarray, int]]

    def __post_init__(self):
        strides = [s for _, s in self.levels]
        if strides != sorted(strides) or len(set(strides)) != len(strides):
            raise ValueError("strides must be strictly ascending")
        chans = {t.shape[1] for t, _ in self.levels}
        if len(chans) != 1:
            raise ValueError("all levels must share one channel count")
        for t, _ in self.levels:
            if t.ndim != 4 or t.shape[0] != 1:
                raise ValueError(f"level must be (1, C, H, W), got {t.shape}")
            if not np.all(np.isfinite(t)):
                raise ValueError("non-finite feature values")

    @property
    def channels(self) -> int:
        return self.levels[0][0].shape[1]

    @property
    def n_levels(self) -> int:
        return len(self.levels)


@dataclass
class GREParams:
    """1x1 conv mixing weights: (C_out, L*C) matrix plus bias of length C_out."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.ndim != 1 \
                or self.weights.shape[0] != self.bias.shape[0]:
            raise ValueError("weights must be (C_out, L*C), bias length C_out")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValueError("non-finite parameters")


def _sample_grid(box: BBox, stride: float, out_size: tuple[int, int],
                 samples_per_bin: int):
    """Sample coordinates for RoI-Align: per output bin, an n x n grid of
    regularly spaced sub-bin centers in feature-map coordinates."""
    oh, ow = out_size
    n = samples_per_bin
    x1, y1 = box.x1 / stride, box.y1 / stride
    bw = (box.x2 - box.x1) / stride / ow
    bh = (box.y2 - box.y1) / stride / oh
    # xs[j, k] = x-coordinate of sample k inside output column j
    offs = (np.arange(n) + 0.5) / n
    xs = x1 + (np.arange(ow)[:, None] + offs[None, :]) * bw
    ys = y1 + (np.arange(oh)[:, None] + offs[None, :]) * bh
    return ys, xs


def _bilinear_weights(coords: np.ndarray, size: int):
    """Clamped bilinear interpolation along one axis: indices i0, i1 and the
    weight on i1."""
    c = np.clip(coords, 0.0, size - 1)
    i0 = np.floor(c).astype(int)
    i0 = np.minimum(i0, size - 2) if size > 1 else np.zeros_like(i0)
    i1 = np.minimum(i0 + 1, size - 1)
    f = c - i0
    return i0, i1, f


def roi_align(level: np.ndarray, stride: float, box: BBox,
              out_size: tuple[int, int], samples_per_bin: int = 2) -> np.ndarray:
    """Bilinear RoI-Align of one box against a (1, C, H, W) feature map.

    Returns (1, C, oh, ow); each output bin averages samples_per_bin**2
    bilinear samples. Coordinates are clamped to the feature grid.
    """
    if out_size[0] <= 0 or out_size[1] <= 0:
        raise ValueError("out_size must be positive")
    feat = np.asarray(level, dtype=np.float64)
    if feat.ndim != 4 or feat.shape[0] != 1:
        raise ValueError(f"expected (1, C, H, W), got {feat.shape}")
    _, c, h, w = feat.shape
    oh, ow = out_size
    n = samples_per_bin
    ys, xs = _sample_grid(box, stride, out_size, n)
    y0, y1, fy = _bilinear_weights(ys, h)     # (oh, n)
    x0, x1, fx = _bilinear_weights(xs, w)     # (ow, n)

    f = feat[0]                               # (C, H, W)
    # gather the four corners for every (row-bin, row-sample, col-bin, col-sample)
    def corner(yi, xi):
        return f[:, yi[:, :, None, None], xi[None, None, :, :]]

    wy0, wy1 = (1 - fy)[:, :, None, None], fy[:, :, None, None]
    wx0, wx1 = (1 - fx)[None, None, :, :], fx[None, None, :, :]
    vals = (corner(y0, x0) * wy0 * wx0 + corner(y0, x1) * wy0 * wx1
            + corner(y1, x0) * wy1 * wx0 + corner(y1, x1) * wy1 * wx1)
    # vals: (C, oh, n, ow, n) -> average the n*n samples per bin
    return vals.mean(axis=(2, 4))[None]


def roi_align_backward(level_shape: tuple, stride: float, box: BBox,
                       out_size: tuple[int, int], upstream: np.ndarray,
                       samples_per_bin: int = 2) -> np.ndarray:
    """Gradient of roi_align w.r.t. the feature map, for upstream (1, C, oh, ow)."""
    _, c, h, w = level_shape
    oh, ow = out_size
    n = samples_per_bin
    ys, xs = _sample_grid(box, stride, out_size, n)
    y0, y1, fy = _bilinear_weights(ys, h)
    x0, x1, fx = _bilinear_weights(xs, w)
    g = np.asarray(upstream, dtype=np.float64)[0] / (n * n)   # (C, oh, ow)
    grad = np.zeros((c, h, w), dtype=np.float64)
    wy = [(y0, 1 - fy), (y1, fy)]
    wx = [(x0, 1 - fx), (x1, fx)]
    for yi, fyw in wy:
        for xi, fxw in wx:
            # contribution of each sample's corner, per channel
            contrib = g[:, :, None, :, None] * fyw[None, :, :, None, None] \
                * fxw[None, None, None, :, :]
            np.add.at(grad,
                      (np.arange(c)[:, None, None, None, None],
                       yi[None, :, :, None, None],
                       xi[None, None, None, :, :]),
                      contrib)
    return grad[None]


def assign_level(box: BBox, k0: int = 2, canonical: float = 224.0,
                 n_levels: int = 4) -> int:
    """Standard FPN scale-based level assignment, clamped to the pyramid."""
    k = math.floor(k0 + math.log2(math.sqrt(box.area) / canonical))
    return int(min(max(k, 0), n_levels - 1))


def baseline_extract(pyr: Pyramid, rois: list[BBox], out_size: tuple[int, int],
                     k0: int = 2, canonical: float = 224.0,
                     samples_per_bin: int = 2) -> np.ndarray:
    """Per RoI, RoI-Align on its assigned level only. Returns (N, C, oh, ow)."""
    outs = []
    for box in rois:
        lv = assign_level(box, k0, canonical, pyr.n_levels)
        feat, stride = pyr.levels[lv]
        outs.append(roi_align(feat, stride, box, out_size, samples_per_bin))
    return np.concatenate(outs, axis=0) if outs \
        else np.zeros((0, pyr.channels, *out_size))


def _pool_all_levels(pyr: Pyramid, box: BBox, out_size, samples_per_bin) -> np.ndarray:
    """(L*C, oh, ow) channel concatenation of RoI-Align over every level."""
    return np.concatenate(
        [roi_align(feat, stride, box, out_size, samples_per_bin)[0]
         for feat, stride in pyr.levels], axis=0)


def gre_extract(pyr: Pyramid, rois: list[BBox], out_size: tuple[int, int],
                params: GREParams, samples_per_bin: int = 2) -> np.ndarray:
    """Global RoI extraction: pool all levels, concatenate, mix with 1x1 conv.

    Returns (N, C_out, oh, ow).
    """
    lc = pyr.n_levels * pyr.channels
    if params.weights.shape[1] != lc:
        raise ValueError(f"weights expect {params.weights.shape[1]} input "
                         f"channels, pyramid provides {lc}")
    outs = []
    for box in rois:
        pooled = _pool_all_levels(pyr, box, out_size, samples_per_bin)  # (L*C, oh, ow)
        mixed = np.tensordot(params.weights, pooled, axes=([1], [0]))
        outs.append(mixed + params.bias[:, None, None])
    return np.stack(outs, axis=0) if outs \
        else np.zeros((0, params.bias.shape[0], *out_size))


def gre_gradients(pyr: Pyramid, rois: list[BBox], out_size: tuple[int, int],
                  params: GREParams, upstream: np.ndarray,
                  samples_per_bin: int = 2):
    """Analytic gradients of <upstream, gre_extract(...)>.

    Returns (grad_weights, grad_bias, grad_pyramid) where grad_pyramid is a
    list of per-level arrays shaped like the pyramid's feature maps.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    c_out = params.bias.shape[0]
    if upstream.shape != (len(rois), c_out, *out_size):
        raise ValueError(f"upstream shape {upstream.shape} does not match "
                         f"({len(rois)}, {c_out}, {out_size[0]}, {out_size[1]})")
    gw = np.zeros_like(params.weights)
    gb = upstream.sum(axis=(0, 2, 3))
    gpyr = [np.zeros_like(feat) for feat, _ in pyr.levels]
    c = pyr.channels
    for r, box in enumerate(rois):
        pooled = _pool_all_levels(pyr, box, out_size, samples_per_bin)
        u = upstream[r]                                        # (C_out, oh, ow)
        gw += np.tensordot(u, pooled, axes=([1, 2], [1, 2]))
        gpooled = np.tensordot(params.weights.T, u, axes=([1], [0]))  # (L*C, oh, ow)
        for lv, (feat, stride) in enumerate(pyr.levels):
            gpyr[lv] += roi_align_backward(
                feat.shape, stride, box, out_size,
                gpooled[lv * c:(lv + 1) * c][None], samples_per_bin)
    return gw, gb, gpyr


def gradient_check(pyr: Pyramid, rois: list[BBox], out_size: tuple[int, int],
                   params: GREParams, upstream: np.ndarray,
                   eps: float = 1e-5, samples_per_bin: int = 2) -> float:
    """Max relative error of analytic gradients vs central finite differences.

    The loss is <upstream, gre_extract(...)>; every weight, bias, and
    pyramid entry is perturbed by +-eps.
    """
    upstream = np.asarray(upstream, dtype=np.float64)

    def loss(p: GREParams, levels) -> float:
        out = gre_extract(Pyramid(levels=levels), rois, out_size, p,
                          samples_per_bin)
        return float((upstream * out).sum())

    gw, gb, gpyr = gre_gradients(pyr, rois, out_size, params, upstream,
                                 samples_per_bin)
    worst = 0.0

    def rel(a, fd):
        return abs(a - fd) / max(abs(a), abs(fd), 1.0)

    for arr, grad, rebuild in [
            (params.weights, gw,
             lambda a: (GREParams(a, params.bias), pyr.levels)),
            (params.bias, gb,
             lambda a: (GREParams(params.weights, a), pyr.levels))]:
        flat = arr.reshape(-1)
        for i in range(flat.size):
            hi, lo = arr.copy(), arr.copy()
            hi.reshape(-1)[i] = flat[i] + eps
            lo.reshape(-1)[i] = flat[i] - eps
            p_hi, lv_hi = rebuild(hi)
            p_lo, lv_lo = rebuild(lo)
            fd = (loss(p_hi, lv_hi) - loss(p_lo, lv_lo)) / (2 * eps)
            worst = max(worst, rel(grad.reshape(-1)[i], fd))

    for lv in range(pyr.n_levels):
        feat, stride = pyr.levels[lv]
        flat = feat.reshape(-1)
        for i in range(flat.size):
            hi, lo = feat.copy(), feat.copy()
            hi.reshape(-1)[i] += eps
            lo.reshape(-1)[i] -= eps
            levels_hi = [(hi if j == lv else f, s)
                         for j, (f, s) in enumerate(pyr.levels)]
            levels_lo = [(lo if j == lv else f, s)
                         for j, (f, s) in enumerate(pyr.levels)]
            fd = (loss(params, levels_hi) - loss(params, levels_lo)) / (2 * eps)
            worst = max(worst, rel(gpyr[lv].reshape(-1)[i], fd))
    return worst


def selector_params(pyr: Pyramid, level: int) -> GREParams:
    """Weights that pick exactly one level's channels: identity block at that
    level, zeros elsewhere, zero bias. Reduces GRE to the single-level path."""
    c = pyr.channels
    w = np.zeros((c, pyr.n_levels * c))
    w[:, level * c:(level + 1) * c] = np.eye(c)
    return GREParams(weights=w, bias=np.zeros(c))
