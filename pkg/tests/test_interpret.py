"""Integrated gradients, score normalization, grouping, and heatmaps."""

import numpy as np
import pytest

from volmil.interpret import (HeatmapVolume, build_heatmap, heatmap_overlaps,
                              heatmap_to_volume, ig_group_assignment,
                              integrate_fn, integrated_gradients, normalize_ig)
from volmil.mil import TrainConfig, predict, train
from volmil.preprocess import PatchGrid
from volmil.store import FeatureBag


def make_bag(features, sample_id="b0"):
    features = np.asarray(features, dtype=np.float32)
    j = features.shape[0]
    coords = np.zeros((j, 6), dtype=np.uint32)
    coords[:, 0] = np.arange(j)
    coords[:, 3:] = 1
    return FeatureBag(sample_id=sample_id, features=features, coords=coords)


def toy_model(seed=0):
    rng = np.random.default_rng(seed)
    bags, labels = [], []
    for i in range(12):
        y = i % 2
        H = rng.normal(0.0, 0.3, (6, 4))
        H[:, 0] += 1.5 if y else -1.5
        bags.append(make_bag(H, f"b{i:02d}"))
        labels.append(y)
    cfg = TrainConfig(epochs=15, lr0=5e-3, grad_accum=4, dropout=0.2,
                      patch_sample_rate=1.0, seed=seed)
    model, _, _ = train(bags, labels, cfg)
    return model, bags


# ---------------------------------------------------------------------------
# Normalization

class TestNormalize:
    def test_reference_example(self):
        out = normalize_ig(np.array([-2.0, -1.0, 0.0, 1.0, 4.0]))
        assert np.allclose(out, [-1.0, -0.5, 0.0, 0.25, 1.0])

    def test_range_and_signs(self):
        rng = np.random.default_rng(0)
        raw = rng.standard_normal(100)
        out = normalize_ig(raw)
        assert out.min() >= -1.0 and out.max() <= 1.0
        assert np.array_equal(np.sign(out), np.sign(raw))

    def test_idempotent(self):
        raw = np.array([-3.0, -0.5, 0.0, 2.0, 8.0])
        once = normalize_ig(raw)
        assert np.allclose(normalize_ig(once), once)

    def test_order_preserved_within_sign(self):
        raw = np.array([0.1, 0.7, 0.3, -0.2, -0.9])
        out = normalize_ig(raw)
        assert np.argsort(out[:3]).tolist() == np.argsort(raw[:3]).tolist()
        assert np.argsort(out[3:]).tolist() == np.argsort(raw[3:]).tolist()

    def test_single_sign_inputs(self):
        assert np.allclose(normalize_ig(np.array([2.0, 4.0])), [0.5, 1.0])
        assert np.allclose(normalize_ig(np.array([-2.0, -8.0])), [-0.25, -1.0])
        assert np.allclose(normalize_ig(np.zeros(5)), np.zeros(5))

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            normalize_ig(np.array([]))


# ---------------------------------------------------------------------------
# Path integral core

class TestIntegrateFn:
    def test_linear_map_exact_at_any_m(self):
        rng = np.random.default_rng(1)
        C = rng.standard_normal((5, 3))
        X = rng.standard_normal((5, 3))

        def fn(Y):
            return float((C * Y).sum()), C

        for M in (1, 2, 7, 64):
            raw, value, baseline, gap = integrate_fn(fn, X, M)
            assert np.allclose(raw, (C * X).sum(axis=1), atol=1e-12)
            assert baseline == 0.0
            assert value == pytest.approx((C * X).sum(), abs=1e-12)
            assert gap <= 1e-12

    def test_quadratic_map_integrated_exactly(self):
        # the path derivative of a quadratic is linear in the path parameter,
        # which the midpoint rule integrates without error
        rng = np.random.default_rng(2)
        X = rng.standard_normal((4, 3))

        def fn(Y):
            return float((Y ** 2).sum()), 2.0 * Y

        for M in (1, 4, 16):
            raw, _, _, gap = integrate_fn(fn, X, M)
            assert gap <= 1e-12
            assert np.allclose(raw, (X ** 2).sum(axis=1), atol=1e-12)

    def test_quartic_gap_shrinks_as_one_over_m_squared(self):
        rng = np.random.default_rng(6)
        X = rng.standard_normal((4, 3))
        total4 = float((X ** 4).sum())

        def fn(Y):
            return float((Y ** 4).sum()), 4.0 * Y ** 3

        for M in (1, 4, 16, 64):
            raw, _, _, gap = integrate_fn(fn, X, M)
            # midpoint rule on the cubic path derivative: exact error is
            # sum(X^4) / (2 M^2)
            assert gap == pytest.approx(total4 / (2 * M * M), rel=1e-9)
            assert np.allclose(raw,
                               (X ** 4).sum(axis=1) * (1 - 1 / (2 * M * M)),
                               atol=1e-12)

    def test_invalid_m(self):
        with pytest.raises(ValueError):
            integrate_fn(lambda Y: (0.0, Y), np.ones((2, 2)), 0)

    def test_nonfinite_gradient_raises(self):
        def fn(Y):
            return 0.0, np.full_like(Y, np.inf)

        with pytest.raises(FloatingPointError):
            integrate_fn(fn, np.ones((2, 2)), 4)


# ---------------------------------------------------------------------------
# Model attribution

class TestIntegratedGradients:
    def test_completeness_on_trained_model(self):
        model, bags = toy_model()
        for bag in bags[:4]:
            res = integrated_gradients(model, bag, M=256)
            target = res.value - res.baseline_value
            assert res.completeness_gap <= 1e-3 * abs(target)

    def test_gap_converges_with_m(self):
        model, bags = toy_model()
        gaps = [integrated_gradients(model, bags[0], M=M).completeness_gap
                for M in (8, 64, 512)]
        assert gaps[2] < gaps[0]
        assert gaps[2] < gaps[1] * 2  # allow noise near convergence

    def test_value_matches_prediction(self):
        model, bags = toy_model()
        res = integrated_gradients(model, bags[1], M=32)
        assert res.value == pytest.approx(predict(model, bags[1]).p, abs=1e-12)
        assert res.M == 32
        assert res.raw.shape == (bags[1].j,)
        assert np.allclose(res.normalized, normalize_ig(res.raw))

    def test_accepts_array_or_bag(self):
        model, bags = toy_model()
        a = integrated_gradients(model, bags[0], M=16)
        b = integrated_gradients(model, bags[0].features.astype(np.float64), M=16)
        assert np.allclose(a.raw, b.raw, atol=1e-12)

    def test_discriminative_instances_attributed(self):
        # instances pushing toward class 1 should score higher than
        # the neutral ones inside the same bag
        model, _ = toy_model()
        H = np.zeros((4, 4))
        H[0, 0] = 1.5    # class-1 direction
        H[1, 0] = -1.5   # class-0 direction
        res = integrated_gradients(model, H, M=128)
        assert res.raw[0] > res.raw[1]


# ---------------------------------------------------------------------------
# Cohort grouping

class TestGroups:
    def test_decile_thresholds_on_1_to_100(self):
        scores = [np.arange(1.0, 101.0)]
        g = ig_group_assignment(scores)
        assert g.high_threshold == pytest.approx(90.1)
        assert g.low_threshold == pytest.approx(10.9)
        assert (g.labels == "high").sum() == 10
        assert (g.labels == "low").sum() == 10
        assert g.per_sample[0]["high_fraction"] == pytest.approx(0.1)
        assert g.per_sample[0]["low_fraction"] == pytest.approx(0.1)
        assert g.per_sample[0]["high_low_ratio"] == pytest.approx(1.0)

    def test_middle_band_straddles_zero(self):
        rng = np.random.default_rng(3)
        scores = [rng.uniform(-1, 1, 500)]
        g = ig_group_assignment(scores)
        lo, hi = g.middle_band
        assert lo <= 0.0 <= hi
        mids = np.asarray(scores[0])[(scores[0] >= lo) & (scores[0] <= hi)]
        # ~10% of the pooled mass sits in the middle band
        assert 0.05 <= len(mids) / 500 <= 0.15

    def test_thresholds_shared_across_samples(self):
        a = np.arange(1.0, 51.0)
        b = np.arange(51.0, 101.0)
        g = ig_group_assignment([a, b])
        # all top-decile instances live in the second sample
        assert g.per_sample[0]["high_fraction"] == 0.0
        assert g.per_sample[1]["high_fraction"] == pytest.approx(0.2)
        assert g.per_sample[0]["low_fraction"] == pytest.approx(0.2)
        assert g.per_sample[1]["high_low_ratio"] == float("inf")

    def test_labels_concatenated_in_order(self):
        g = ig_group_assignment([np.array([1.0, 2.0]) for _ in range(5)])
        assert g.labels.shape == (10,)

    def test_too_few_instances(self):
        with pytest.raises(ValueError, match="at least 10"):
            ig_group_assignment([np.arange(5.0)])


# ---------------------------------------------------------------------------
# Heatmaps

def grid_from(entries, patch_shape, mode="cuboids3d"):
    return PatchGrid(mode=mode, patch_shape=patch_shape,
                     entries=np.array(entries, dtype=np.int64))


class TestHeatmap:
    def test_single_patch_coverage(self):
        g = grid_from([(0, 0, 0)], (2, 2, 2))
        h = build_heatmap((2, 2, 2), g, np.array([0.7]))
        assert (h.values == 1.0).all()          # lone positive normalizes to 1
        assert (h.coverage == 1).all()

    def test_overlap_averaging(self):
        # depth tiles [0:2] score 1 and [1:3] score 3: averages 1, 2, 3
        g = grid_from([(0, 0, 0), (1, 0, 0)], (2, 1, 1))
        h = build_heatmap((3, 1, 1), g, np.array([1.0, 3.0]))
        assert np.allclose(h.values[:, 0, 0], [1 / 3, 2 / 3, 1.0])
        assert h.coverage[:, 0, 0].tolist() == [1, 2, 1]

    def test_uncovered_voxels_are_nan(self):
        g = grid_from([(0, 0, 0)], (1, 1, 1))
        h = build_heatmap((2, 2, 2), g, np.array([-0.4]))
        assert h.values[0, 0, 0] == -1.0
        assert np.isnan(h.values[1, 1, 1])
        assert h.coverage[1, 1, 1] == 0

    def test_entry_order_irrelevant(self):
        entries = [(0, 0, 0), (1, 0, 0), (2, 0, 0)]
        scores = np.array([0.5, -1.0, 2.0])
        a = build_heatmap((4, 2, 2), grid_from(entries, (2, 2, 2)), scores)
        perm = [2, 0, 1]
        b = build_heatmap((4, 2, 2),
                          grid_from([entries[i] for i in perm], (2, 2, 2)),
                          scores[perm])
        assert np.allclose(a.values, b.values, equal_nan=True)
        assert np.array_equal(a.coverage, b.coverage)

    def test_mixed_signs_normalized_per_sign(self):
        g = grid_from([(0, 0, 0), (2, 0, 0), (4, 0, 0)], (2, 2, 2))
        h = build_heatmap((6, 2, 2), g, np.array([2.0, -8.0, 4.0]))
        assert h.values[0, 0, 0] == pytest.approx(0.5)
        assert h.values[2, 0, 0] == pytest.approx(-1.0)
        assert h.values[4, 0, 0] == pytest.approx(1.0)

    def test_score_count_mismatch(self):
        g = grid_from([(0, 0, 0)], (1, 1, 1))
        with pytest.raises(ValueError, match="one attribution per grid entry"):
            build_heatmap((2, 2, 2), g, np.array([1.0, 2.0]))

    def test_shape_validation(self):
        with pytest.raises(ValueError, match="shapes differ"):
            HeatmapVolume(values=np.zeros((2, 2, 2), dtype=np.float32),
                          coverage=np.zeros((2, 2, 3), dtype=np.uint16))

    def test_default_render_overlaps(self):
        assert heatmap_overlaps((16, 16, 16)) == (8, 12, 12)
        assert heatmap_overlaps((1, 32, 32)) == (0, 24, 24)

    def test_packaged_as_volume(self):
        g = grid_from([(0, 0, 0)], (1, 2, 2))
        h = build_heatmap((2, 2, 2), g, np.array([1.0]))
        v = heatmap_to_volume(h, voxel_size=(2.0, 1.0, 1.0))
        assert v.data.shape == (1, 2, 2, 2)
        assert v.data.dtype == np.float32
        assert v.voxel_size == (2.0, 1.0, 1.0)
        assert np.isnan(v.data[0, 1]).all()
