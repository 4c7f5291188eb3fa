import numpy as np
import pytest

from longtaildet.geometry import BBox
from longtaildet.gre_fpn import (GREParams, Pyramid, assign_level,
                                 baseline_extract, gre_extract, gre_gradients,
                                 roi_align, selector_params)


def brute_force_roi_align(feat, stride, box, out_size, n):
    """Oracle: naive python-loop bilinear sampling with clamped coordinates."""
    _, c, h, w = feat.shape
    oh, ow = out_size
    out = np.zeros((1, c, oh, ow))

    def bilinear(ch, y, x):
        y = min(max(y, 0.0), h - 1)
        x = min(max(x, 0.0), w - 1)
        y0 = min(int(np.floor(y)), h - 2) if h > 1 else 0
        x0 = min(int(np.floor(x)), w - 2) if w > 1 else 0
        y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
        fy, fx = y - y0, x - x0
        f = feat[0, ch]
        return (f[y0, x0] * (1 - fy) * (1 - fx) + f[y0, x1] * (1 - fy) * fx
                + f[y1, x0] * fy * (1 - fx) + f[y1, x1] * fy * fx)

    bx1, by1 = box.x1 / stride, box.y1 / stride
    bw = (box.x2 - box.x1) / stride / ow
    bh = (box.y2 - box.y1) / stride / oh
    for ch in range(c):
        for i in range(oh):
            for j in range(ow):
                acc = 0.0
                for sy in range(n):
                    for sx in range(n):
                        y = by1 + (i + (sy + 0.5) / n) * bh
                        x = bx1 + (j + (sx + 0.5) / n) * bw
                        acc += bilinear(ch, y, x)
                out[0, ch, i, j] = acc / (n * n)
    return out


def random_pyramid(rng, n_levels=2, c=3, base=8, base_stride=4):
    levels = []
    size, stride = base, base_stride
    for _ in range(n_levels):
        levels.append((rng.standard_normal((1, c, size, size)), stride))
        size = max(1, size // 2)
        stride *= 2
    return Pyramid(levels=levels)


class TestRoiAlign:
    def test_constant_map(self):
        feat = np.full((1, 2, 8, 8), 3.25)
        out = roi_align(feat, 4, BBox(1, 1, 20, 17), (7, 7))
        assert np.allclose(out, 3.25, atol=1e-12)

    def test_x_ramp_closed_form(self):
        h = w = 10
        feat = np.tile(np.arange(w, dtype=np.float64), (h, 1))[None, None]
        box = BBox(4, 4, 28, 28)      # stride 4 -> feature coords [1, 7]
        n = 2
        out = roi_align(feat, 4, box, (3, 3), samples_per_bin=n)
        bw = (28 - 4) / 4 / 3
        for j in range(3):
            xs = [1 + (j + (k + 0.5) / n) * bw for k in range(n)]
            assert np.allclose(out[0, 0, :, j], np.mean(xs), atol=1e-12)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        feat = rng.standard_normal((1, 3, 9, 11))
        for _ in range(5):
            x1, y1 = rng.uniform(0, 20, size=2)
            box = BBox(x1, y1, x1 + rng.uniform(4, 30), y1 + rng.uniform(4, 30))
            got = roi_align(feat, 4, box, (5, 4), samples_per_bin=2)
            want = brute_force_roi_align(feat, 4, box, (5, 4), 2)
            assert np.abs(got - want).max() < 1e-12

    def test_zero_out_size_rejected(self):
        with pytest.raises(ValueError):
            roi_align(np.zeros((1, 1, 4, 4)), 4, BBox(0, 0, 4, 4), (0, 3))


class TestAssignLevel:
    def test_canonical_scale(self):
        box = BBox(0, 0, 224, 224)
        assert assign_level(box, k0=2, n_levels=6) == 2

    def test_double_scale_one_level_up(self):
        box = BBox(0, 0, 448, 448)
        assert assign_level(box, k0=2, n_levels=6) == 3

    def test_tiny_box_clamped(self):
        assert assign_level(BBox(0, 0, 2, 2), k0=2, n_levels=4) == 0

    def test_huge_box_clamped(self):
        assert assign_level(BBox(0, 0, 5000, 5000), k0=2, n_levels=4) == 3


class TestBaselineExtract:
    def test_single_level_equals_roi_align(self):
        rng = np.random.default_rng(1)
        feat = rng.standard_normal((1, 2, 8, 8))
        pyr = Pyramid(levels=[(feat, 4)])
        rois = [BBox(2, 2, 20, 20)]
        out = baseline_extract(pyr, rois, (7, 7))
        assert np.array_equal(out, roi_align(feat, 4, rois[0], (7, 7)))

    def test_constant_pyramid(self):
        pyr = Pyramid(levels=[(np.full((1, 2, 8, 8), 5.0), 4),
                              (np.full((1, 2, 4, 4), 5.0), 8)])
        rois = [BBox(0, 0, 30, 30), BBox(0, 0, 500, 500)]
        out = baseline_extract(pyr, rois, (7, 7))
        assert np.allclose(out, 5.0, atol=1e-12)

    def test_composition_oracle(self):
        rng = np.random.default_rng(2)
        pyr = random_pyramid(rng, n_levels=3)
        rois = [BBox(1, 1, 40, 30), BBox(2, 2, 300, 280), BBox(0, 0, 900, 900)]
        out = baseline_extract(pyr, rois, (5, 5))
        for i, box in enumerate(rois):
            lv = assign_level(box, 2, 224.0, 3)
            feat, stride = pyr.levels[lv]
            assert np.array_equal(out[i], roi_align(feat, stride, box, (5, 5))[0])


class TestGreExtract:
    def test_selector_reduces_to_single_level(self):
        rng = np.random.default_rng(3)
        pyr = random_pyramid(rng, n_levels=3)
        rois = [BBox(1, 2, 25, 22), BBox(4, 4, 18, 30)]
        for lv in range(3):
            feat, stride = pyr.levels[lv]
            got = gre_extract(pyr, rois, (7, 7), selector_params(pyr, lv))
            want = np.concatenate(
                [roi_align(feat, stride, r, (7, 7)) for r in rois])
            assert np.abs(got - want).max() < 1e-12

    def test_zero_weights_give_bias(self):
        rng = np.random.default_rng(4)
        pyr = random_pyramid(rng, n_levels=2)
        bias = np.array([1.5, -2.0])
        params = GREParams(np.zeros((2, 2 * pyr.channels)), bias)
        out = gre_extract(pyr, [BBox(0, 0, 10, 10)], (3, 3), params)
        assert np.allclose(out[0, 0], 1.5) and np.allclose(out[0, 1], -2.0)

    def test_output_shape(self):
        rng = np.random.default_rng(5)
        pyr = random_pyramid(rng, n_levels=2, c=4)
        params = GREParams(rng.standard_normal((6, 8)), rng.standard_normal(6))
        out = gre_extract(pyr, [BBox(0, 0, 9, 9)] * 3, (7, 5), params)
        assert out.shape == (3, 6, 7, 5)

    def test_linear_in_pyramid(self):
        rng = np.random.default_rng(6)
        pyr_x = random_pyramid(rng, n_levels=2)
        pyr_y = Pyramid(levels=[(rng.standard_normal(f.shape), s)
                                for f, s in pyr_x.levels])
        params = GREParams(rng.standard_normal((2, 6)), np.zeros(2))
        rois = [BBox(1, 1, 20, 15)]
        a, b = 0.7, -1.3
        mixed = Pyramid(levels=[(a * fx + b * fy, s)
                                for (fx, s), (fy, _) in zip(pyr_x.levels, pyr_y.levels)])
        lhs = gre_extract(mixed, rois, (7, 7), params)
        rhs = a * gre_extract(pyr_x, rois, (7, 7), params) \
            + b * gre_extract(pyr_y, rois, (7, 7), params)
        assert np.abs(lhs - rhs).max() < 1e-9

    def test_dimension_mismatch(self):
        rng = np.random.default_rng(7)
        pyr = random_pyramid(rng, n_levels=2)
        params = GREParams(rng.standard_normal((2, 5)), rng.standard_normal(2))
        with pytest.raises(ValueError):
            gre_extract(pyr, [BBox(0, 0, 4, 4)], (3, 3), params)


class TestGradients:
    def test_zero_upstream(self):
        rng = np.random.default_rng(8)
        pyr = random_pyramid(rng, n_levels=2)
        params = GREParams(rng.standard_normal((2, 6)), rng.standard_normal(2))
        rois = [BBox(1, 1, 12, 12)]
        gw, gb, gpyr = gre_gradients(pyr, rois, (3, 3), params,
                                     np.zeros((1, 2, 3, 3)))
        assert not gw.any() and not gb.any()
        assert not any(g.any() for g in gpyr)

    def test_bias_gradient_closed_form(self):
        rng = np.random.default_rng(9)
        pyr = random_pyramid(rng, n_levels=2)
        params = GREParams(rng.standard_normal((3, 6)), rng.standard_normal(3))
        rois = [BBox(1, 1, 12, 12), BBox(2, 2, 18, 16)]
        upstream = rng.standard_normal((2, 3, 4, 4))
        _, gb, _ = gre_gradients(pyr, rois, (4, 4), params, upstream)
        assert np.allclose(gb, upstream.sum(axis=(0, 2, 3)), atol=1e-12)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(10)
        pyr = random_pyramid(rng, n_levels=2, c=2, base=6)
        params = GREParams(rng.standard_normal((2, 4)), rng.standard_normal(2))
        rois = [BBox(1.3, 2.1, 14.7, 11.9)]
        out_size = (3, 3)
        upstream = rng.standard_normal((1, 2, 3, 3))
        gw, gb, gpyr = gre_gradients(pyr, rois, out_size, params, upstream)

        def loss(p, levels):
            return float((upstream
                          * gre_extract(Pyramid(levels=levels), rois,
                                        out_size, p)).sum())

        eps = 1e-5
        fd_w = np.zeros_like(gw)
        for i in range(gw.size):
            hi, lo = params.weights.copy(), params.weights.copy()
            hi.reshape(-1)[i] += eps
            lo.reshape(-1)[i] -= eps
            fd_w.reshape(-1)[i] = (loss(GREParams(hi, params.bias), pyr.levels)
                                   - loss(GREParams(lo, params.bias), pyr.levels)) / (2 * eps)
        assert np.abs(fd_w - gw).max() < 1e-7

        fd_p = np.zeros_like(gpyr[0])
        feat, s = pyr.levels[0]
        for i in range(feat.size):
            hi, lo = feat.copy(), feat.copy()
            hi.reshape(-1)[i] += eps
            lo.reshape(-1)[i] -= eps
            fd_p.reshape(-1)[i] = (loss(params, [(hi, s), pyr.levels[1]])
                                   - loss(params, [(lo, s), pyr.levels[1]])) / (2 * eps)
        assert np.abs(fd_p - gpyr[0]).max() < 1e-7

    def test_upstream_shape_checked(self):
        rng = np.random.default_rng(11)
        pyr = random_pyramid(rng, n_levels=2)
        params = GREParams(rng.standard_normal((2, 6)), rng.standard_normal(2))
        with pytest.raises(ValueError):
            gre_gradients(pyr, [BBox(0, 0, 5, 5)], (3, 3), params,
                          np.zeros((1, 2, 4, 4)))


class TestPyramidValidation:
    def test_strides_must_ascend(self):
        with pytest.raises(ValueError):
            Pyramid(levels=[(np.zeros((1, 2, 4, 4)), 8),
                            (np.zeros((1, 2, 8, 8)), 4)])

    def test_channels_must_match(self):
        with pytest.raises(ValueError):
            Pyramid(levels=[(np.zeros((1, 2, 4, 4)), 4),
                            (np.zeros((1, 3, 2, 2)), 8)])
