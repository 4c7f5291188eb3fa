import math

import numpy as np
import pytest

from longtaildet.anchors import (EXCLUDED, NEGATIVE_EASY, NEGATIVE_HARD,
                                 POSITIVE, AnchorGridConfig, SamplerConfig,
                                 classify_candidates, generate_anchors,
                                 sample_batch)
from longtaildet.geometry import BBox, center_distance, diag_norm, iou


def simple_grid(**kw):
    base = dict(image_size=(32, 32), strides=[8], scales=[1.0], ratios=[1.0])
    base.update(kw)
    return AnchorGridConfig(**base)


class TestGenerateAnchors:
    def test_2x2_grid_centers(self):
        cfg = simple_grid(image_size=(16, 16))
        anchors = generate_anchors(cfg)
        assert len(anchors) == 4
        centers = sorted(a.center for a in anchors)
        assert centers == [(4.0, 4.0), (4.0, 12.0), (12.0, 4.0), (12.0, 12.0)]

    def test_count_formula(self):
        cfg = AnchorGridConfig(image_size=(64, 32), strides=[8, 16],
                               scales=[1.0, 2.0], ratios=[0.5, 1.0, 2.0])
        expected = sum((64 // s) * (32 // s) * 2 * 3 for s in (8, 16))
        assert len(generate_anchors(cfg)) == expected

    def test_centers_match_meshgrid_oracle(self):
        cfg = simple_grid(image_size=(40, 24), strides=[8], scales=[2.0])
        xs, ys = np.meshgrid(np.arange(5) * 8 + 4, np.arange(3) * 8 + 4)
        expected = sorted(zip(xs.ravel().tolist(), ys.ravel().tolist()))
        got = sorted((a.center[0], a.center[1]) for a in generate_anchors(cfg))
        assert got == [(float(x), float(y)) for x, y in expected]

    def test_ratio_and_scale_geometry(self):
        cfg = simple_grid(image_size=(8, 8), scales=[2.0], ratios=[4.0])
        (a,) = generate_anchors(cfg)
        assert a.height / a.width == pytest.approx(4.0)
        assert a.area == pytest.approx((8 * 2.0) ** 2)

    def test_border_exclusion(self):
        cfg = simple_grid(image_size=(16, 16), scales=[3.0], exclude_border=True)
        assert generate_anchors(cfg) == []

    def test_empty_scales_rejected(self):
        with pytest.raises(ValueError):
            simple_grid(scales=[])


def make_sampler(**kw):
    return SamplerConfig(**kw)


class TestClassify:
    def test_identical_anchor_positive(self):
        t = BBox(4, 4, 20, 20)
        (label,) = classify_candidates([t], [t], make_sampler())
        assert label.status == POSITIVE
        assert label.max_iou == 1.0

    def test_iou_exactly_point_three_excluded(self):
        # anchor covers exactly 30% of a shared-corner target: IoU == 0.3
        target = BBox(0, 0, 10, 10)
        anchor = BBox(0, 0, 10, 3)
        assert iou(anchor, target) == pytest.approx(0.3)
        (label,) = classify_candidates([anchor], [target], make_sampler())
        assert label.status == EXCLUDED

    def test_far_anchor_excluded_by_distance(self):
        target = BBox(0, 0, 10, 10)           # diag ~14.14, center (5, 5)
        anchor = BBox(30, 30, 40, 40)         # center (35, 35), dist ~42
        (label,) = classify_candidates([anchor], [target], make_sampler())
        assert label.max_iou == 0.0
        assert label.nearest_target_distance > diag_norm(target)
        assert label.status == EXCLUDED

    def test_near_anchor_negative(self):
        target = BBox(0, 0, 10, 10)
        easy = BBox(10.5, 0, 20.5, 10)        # IoU 0, center distance 10.5 < 14.14
        hard = BBox(8, 0, 18, 10)             # IoU 2/18 ~ 0.111 in (0.05, 0.3)
        labels = classify_candidates([easy, hard], [target], make_sampler())
        assert labels[0].status == NEGATIVE_EASY
        assert labels[1].status == NEGATIVE_HARD

    def test_no_targets_all_excluded(self):
        anchors = [BBox(0, 0, 10, 10), BBox(5, 5, 15, 15)]
        labels = classify_candidates(anchors, [], make_sampler())
        assert all(l.status == EXCLUDED for l in labels)

    def test_all_anchors_positive_on_self_targets(self):
        rng = np.random.default_rng(2)
        anchors = [BBox(x, y, x + w, y + h)
                   for x, y, w, h in rng.uniform(1, 20, size=(20, 4))]
        labels = classify_candidates(anchors, anchors, make_sampler())
        assert all(l.status == POSITIVE for l in labels)

    def test_translation_invariance(self):
        rng = np.random.default_rng(6)
        anchors = [BBox(x, y, x + w, y + h)
                   for x, y, w, h in rng.uniform(1, 30, size=(30, 4))]
        targets = [BBox(x, y, x + w, y + h)
                   for x, y, w, h in rng.uniform(1, 30, size=(3, 4))]
        shift = lambda b: BBox(b.x1 + 17.5, b.y1 - 6.25, b.x2 + 17.5, b.y2 - 6.25)
        base = classify_candidates(anchors, targets, make_sampler())
        moved = classify_candidates([shift(a) for a in anchors],
                                    [shift(t) for t in targets], make_sampler())
        assert [l.status for l in base] == [l.status for l in moved]

    def test_nearest_target_fields_consistent(self):
        rng = np.random.default_rng(8)
        anchors = [BBox(x, y, x + w, y + h)
                   for x, y, w, h in rng.uniform(1, 40, size=(25, 4))]
        targets = [BBox(x, y, x + w, y + h)
                   for x, y, w, h in rng.uniform(1, 40, size=(4, 4))]
        for label, a in zip(classify_candidates(anchors, targets, make_sampler()),
                            anchors):
            dists = [center_distance(a, t) for t in targets]
            nearest = int(np.argmin(dists))
            assert label.nearest_target_distance == pytest.approx(dists[nearest])
            assert label.nearest_target_diag == pytest.approx(diag_norm(targets[nearest]))
            assert label.max_iou == pytest.approx(max(iou(a, t) for t in targets))

    def test_config_ordering_enforced(self):
        with pytest.raises(ValueError):
            SamplerConfig(hard_iou_lower=0.4, neg_iou_upper=0.3)


def synthetic_candidates(n_pos, n_hard, n_easy):
    from longtaildet.anchors import CandidateLabel
    mk = lambda status, i: CandidateLabel(
        BBox(i, 0, i + 1, 1), 0.0, 1.0, 2.0, status)
    return ([mk(POSITIVE, i) for i in range(n_pos)]
            + [mk(NEGATIVE_HARD, 100 + i) for i in range(n_hard)]
            + [mk(NEGATIVE_EASY, 1000 + i) for i in range(n_easy)])


class TestSampleBatch:
    def test_quota_split(self):
        cfg = make_sampler(batch_size=10, pos_fraction=0.0, hard_neg_fraction=0.5)
        batch = sample_batch(synthetic_candidates(0, 20, 20), cfg, rng_seed=0)
        assert batch.diagnostics["sampled_negative_hard"] == 5
        assert batch.diagnostics["sampled_negative_easy"] == 5

    def test_hard_pool_empty_falls_back_to_easy(self):
        cfg = make_sampler(batch_size=10, pos_fraction=0.0)
        batch = sample_batch(synthetic_candidates(0, 0, 30), cfg, rng_seed=0)
        assert batch.diagnostics["sampled_negative_hard"] == 0
        assert batch.diagnostics["sampled_negative_easy"] == 10

    def test_easy_pool_empty_backfills_hard(self):
        cfg = make_sampler(batch_size=10, pos_fraction=0.0)
        batch = sample_batch(synthetic_candidates(0, 30, 0), cfg, rng_seed=0)
        assert batch.diagnostics["sampled_negative_hard"] == 10

    def test_positives_capped_by_fraction(self):
        cfg = make_sampler(batch_size=16, pos_fraction=0.25)
        batch = sample_batch(synthetic_candidates(50, 50, 50), cfg, rng_seed=0)
        assert len(batch.positives) == 4
        assert len(batch.negatives) == 12

    def test_no_candidate_sampled_twice(self):
        cfg = make_sampler(batch_size=40, pos_fraction=0.5)
        batch = sample_batch(synthetic_candidates(30, 30, 30), cfg, rng_seed=1)
        picked = [id(c) for c in batch.positives + batch.negatives]
        assert len(picked) == len(set(picked))

    def test_deterministic(self):
        cfg = make_sampler(batch_size=20, pos_fraction=0.25)
        cands = synthetic_candidates(30, 30, 30)
        a = sample_batch(cands, cfg, rng_seed=9)
        b = sample_batch(cands, cfg, rng_seed=9)
        assert [id(c) for c in a.negatives] == [id(c) for c in b.negatives]

    def test_empty_pools_give_empty_batch(self):
        cfg = make_sampler(batch_size=10)
        batch = sample_batch([], cfg, rng_seed=0)
        assert batch.positives == [] and batch.negatives == []
        assert batch.diagnostics["pool_positive"] == 0

    def test_realized_share_near_fraction(self):
        cfg = make_sampler(batch_size=21, pos_fraction=0.0, hard_neg_fraction=0.5)
        cands = synthetic_candidates(0, 100, 100)
        shares = [sample_batch(cands, cfg, rng_seed=s).diagnostics["realized_hard_share"]
                  for s in range(200)]
        assert abs(float(np.mean(shares)) - 0.5) < 0.02
