"""Segmentation, patch grids, normalization, and augmentation behavior."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from volmil.preprocess import (MaskStack, NormParams, PatchGrid, SegParams,
                               build_patch_grid, extract_patch,
                               jitter_intensity, read_patch_grid, resolve_norm,
                               rotate_patch, segment_volume, tissue_fraction,
                               write_patch_grid)
from volmil.store import Volume


def vol(data: np.ndarray) -> Volume:
    """Wrap a (D, H, W) array as a single-channel volume."""
    return Volume(data=data[None].astype(np.uint16))


PASSTHRU = SegParams(air_mean_threshold=1.0, median_kernel=1,
                     binarize_threshold=50.0)


# ---------------------------------------------------------------------------
# Segmentation

class TestSegmentation:
    def test_air_planes_dropped(self):
        data = np.zeros((6, 8, 8))
        data[1] = 100
        data[4] = 100
        m = segment_volume(vol(data), PASSTHRU)
        assert m.kept_planes == [1, 4]
        assert m.mask[1].all() and m.mask[4].all()
        assert not m.mask[0].any() and not m.mask[5].any()
        assert m.areas.tolist() == [0, 64, 0, 0, 64, 0]

    def test_cube_mask_recovered(self):
        data = np.zeros((3, 16, 16))
        data[1, 4:8, 6:10] = 200
        m = segment_volume(vol(data), SegParams(air_mean_threshold=0.5,
                                                median_kernel=1,
                                                binarize_threshold=100.0))
        assert m.kept_planes == [1]
        expected = np.zeros((16, 16), dtype=bool)
        expected[4:8, 6:10] = True
        assert np.array_equal(m.mask[1], expected)
        assert m.areas[1] == 16

    def test_band_mask(self):
        data = np.zeros((1, 12, 12))
        data[0, :, 3:6] = 300
        m = segment_volume(vol(data), SegParams(air_mean_threshold=0.5,
                                                median_kernel=1,
                                                binarize_threshold=100.0))
        assert m.areas[0] == 12 * 3
        assert m.mask[0, :, 3:6].all()
        assert not m.mask[0, :, :3].any()

    def test_min_tissue_area_drops_small_blobs(self):
        data = np.zeros((2, 16, 16))
        data[0, 2:4, 2:4] = 60000       # 4 voxels
        data[1, 2:10, 2:10] = 60000     # 64 voxels
        p = SegParams(air_mean_threshold=0.5, median_kernel=1,
                      binarize_threshold=100.0, min_tissue_area=10)
        m = segment_volume(vol(data), p)
        assert m.kept_planes == [1]
        # dropped plane is zeroed in both mask and areas
        assert not m.mask[0].any()
        assert m.areas[0] == 0

    def test_median_filter_removes_speckle(self):
        data = np.zeros((1, 16, 16))
        data[0, 8, 8] = 65535           # single hot voxel, plane mean is 256
        p = SegParams(air_mean_threshold=1.0, median_kernel=3,
                      binarize_threshold=100.0)
        m = segment_volume(vol(data), p)
        assert m.empty

    def test_holes_filled(self):
        data = np.zeros((1, 16, 16))
        data[0, 4:12, 4:12] = 60000     # solid square
        data[0, 5:11, 5:11] = 0         # hollow it out
        m = segment_volume(vol(data), SegParams(air_mean_threshold=0.5,
                                                median_kernel=1,
                                                binarize_threshold=100.0))
        assert m.areas[0] == 64         # interior filled back in
        assert m.mask[0, 8, 8]

    def test_closing_bridges_gap(self):
        data = np.zeros((1, 16, 16))
        data[0, 4:9, 2:7] = 60000
        data[0, 4:9, 10:15] = 60000     # 3-column gap
        base = dict(air_mean_threshold=0.5, median_kernel=1,
                    binarize_threshold=100.0)
        plain = segment_volume(vol(data), SegParams(**base))
        assert plain.areas[0] == 50
        assert not plain.mask[0, 6, 8]
        closed = segment_volume(vol(data), SegParams(**base, closing_radius=2))
        assert closed.mask[0, 6, 8]
        assert closed.areas[0] > 50

    def test_otsu_threshold_splits_bimodal(self):
        data = np.full((1, 16, 16), 10.0)
        data[0, 4:12, 4:12] = 200
        p = SegParams(air_mean_threshold=1.0, median_kernel=1,
                      binarize_threshold=10000.0, otsu=True)
        m = segment_volume(vol(data), p)
        # fixed threshold would have rejected everything; otsu finds the modes
        assert m.areas[0] == 64

    def test_all_air_volume_is_empty_not_error(self):
        m = segment_volume(vol(np.zeros((4, 8, 8))), PASSTHRU)
        assert m.empty
        assert m.kept_planes == []
        with pytest.raises(ValueError, match="no kept planes"):
            m.reference_plane()

    def test_even_median_kernel_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            SegParams(median_kernel=2)

    def test_reference_plane_largest_area_lowest_tie(self):
        mask = np.ones((4, 4, 4), dtype=bool)
        areas = np.array([5, 9, 9, 2])
        m = MaskStack(mask=mask, areas=areas, kept_planes=[0, 1, 2, 3])
        assert m.reference_plane() == 1

    def test_kept_planes_sorted(self):
        m = MaskStack(mask=np.ones((3, 2, 2), dtype=bool),
                      areas=np.array([1, 1, 1]), kept_planes=[2, 0, 1])
        assert m.kept_planes == [0, 1, 2]


# ---------------------------------------------------------------------------
# Patch grids

def full_stack(d: int, h: int, w: int, ref: int | None = None) -> MaskStack:
    """All-tissue mask; optional area spike to pin the reference plane."""
    areas = np.full(d, h * w, dtype=np.int64)
    if ref is not None:
        areas[ref] += 1
    return MaskStack(mask=np.ones((d, h, w), dtype=bool), areas=areas,
                     kept_planes=list(range(d)))


class TestGrid2D:
    def test_tiles_cover_bbox_and_skip_empty(self):
        mask = np.zeros((1, 16, 32), dtype=bool)
        mask[0, :, :8] = True
        mask[0, :, 24:] = True
        m = MaskStack(mask=mask, areas=np.array([mask.sum()]), kept_planes=[0])
        g = build_patch_grid(m, "planes2d", (1, 16, 8))
        got = {tuple(e) for e in g.entries}
        # origins 8 and 16 fall in the gap and carry no tissue
        assert got == {(0, 0, 0), (0, 0, 24)}

    def test_one_entry_per_kept_plane_when_patch_spans_plane(self):
        m = full_stack(5, 8, 8)
        g = build_patch_grid(m, "planes2d", (1, 8, 8))
        assert len(g) == 5
        assert sorted(e[0] for e in g.entries) == [0, 1, 2, 3, 4]
        assert g.reference_plane is None

    def test_planes_subset_restricts_grid(self):
        m = full_stack(5, 8, 8)
        g = build_patch_grid(m, "planes2d", (1, 8, 8), planes=[3])
        assert [tuple(e) for e in g.entries] == [(3, 0, 0)]
        # planes outside the kept set are ignored
        g2 = build_patch_grid(m, "planes2d", (1, 8, 8), planes=[3, 99])
        assert len(g2) == 1

    def test_narrow_bbox_gets_single_anchored_tile(self):
        mask = np.zeros((1, 8, 16), dtype=bool)
        mask[0, :, 10:14] = True        # 4 columns, patch is 8 wide
        m = MaskStack(mask=mask, areas=np.array([mask.sum()]), kept_planes=[0])
        g = build_patch_grid(m, "planes2d", (1, 8, 8))
        assert [tuple(e) for e in g.entries] == [(0, 0, 8)]

    def test_depth_must_be_one(self):
        with pytest.raises(ValueError, match="depth 1"):
            build_patch_grid(full_stack(4, 8, 8), "planes2d", (2, 8, 8))

    def test_patch_larger_than_volume_rejected(self):
        with pytest.raises(ValueError, match="exceeds"):
            build_patch_grid(full_stack(4, 8, 8), "planes2d", (1, 16, 8))


class TestGrid3D:
    def test_depths_form_arithmetic_progression_through_reference(self):
        m = full_stack(64, 32, 32, ref=24)
        g = build_patch_grid(m, "cuboids3d", (16, 16, 16), overlaps=(8, 0, 0))
        assert g.reference_plane == 24
        depths = np.unique(g.entries[:, 0])
        assert depths.tolist() == [0, 8, 16, 24, 32, 40, 48]
        assert depths.min() >= 0 and depths.max() + 16 <= 64
        # 7 depth groups x 2x2 in-plane tiles
        assert len(g) == 7 * 4

    def test_replication_in_both_directions(self):
        m = full_stack(6, 8, 8, ref=3)
        g = build_patch_grid(m, "cuboids3d", (2, 8, 8), overlaps=(1, 0, 0))
        assert np.unique(g.entries[:, 0]).tolist() == [0, 1, 2, 3, 4]

    def test_inplane_overlap_steps(self):
        m = full_stack(4, 24, 16, ref=0)
        g = build_patch_grid(m, "cuboids3d", (4, 16, 16), overlaps=(0, 8, 0))
        assert sorted(set(int(e[1]) for e in g.entries)) == [0, 8]
        assert sorted(set(int(e[2]) for e in g.entries)) == [0]

    def test_mostly_background_cuboids_removed(self):
        mask = np.zeros((4, 10, 10), dtype=bool)
        mask[:, :4, :] = True           # tissue is 40% of any full tile
        areas = mask.sum(axis=(1, 2))
        m = MaskStack(mask=mask, areas=areas, kept_planes=[0, 1, 2, 3])
        g = build_patch_grid(m, "cuboids3d", (4, 10, 10))
        assert len(g) == 0

    def test_exactly_half_tissue_is_kept(self):
        mask = np.zeros((4, 10, 10), dtype=bool)
        mask[:, :5, :] = True
        areas = mask.sum(axis=(1, 2))
        m = MaskStack(mask=mask, areas=areas, kept_planes=[0, 1, 2, 3])
        g = build_patch_grid(m, "cuboids3d", (4, 10, 10))
        assert [tuple(e) for e in g.entries] == [(0, 0, 0)]
        assert tissue_fraction(m, g.entries[0], (4, 10, 10)) == 0.5

    def test_overlap_must_leave_positive_step(self):
        m = full_stack(8, 16, 16)
        with pytest.raises(ValueError, match="overlap"):
            build_patch_grid(m, "cuboids3d", (4, 8, 8), overlaps=(4, 0, 0))
        with pytest.raises(ValueError, match="overlap"):
            build_patch_grid(m, "cuboids3d", (4, 8, 8), overlaps=(0, 8, 0))

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError, match="unknown grid mode"):
            build_patch_grid(full_stack(4, 8, 8), "blobs", (1, 8, 8))
        with pytest.raises(ValueError, match="unknown grid mode"):
            PatchGrid(mode="blobs", patch_shape=(1, 8, 8))

    @settings(max_examples=40, deadline=None)
    @given(d=st.integers(2, 6), hw=st.integers(8, 20),
           pd=st.integers(1, 2), ov=st.integers(0, 1))
    def test_grid_entries_always_in_bounds(self, d, hw, pd, ov):
        if ov >= pd:
            ov = pd - 1
        m = full_stack(d, hw, hw)
        g = build_patch_grid(m, "cuboids3d", (pd, 8, 8), overlaps=(ov, 0, 0))
        assert len(g) > 0
        assert (g.entries >= 0).all()
        assert (g.entries[:, 0] + pd <= d).all()
        assert (g.entries[:, 1] + 8 <= hw).all()
        assert (g.entries[:, 2] + 8 <= hw).all()
        # no duplicate origins
        assert len({tuple(e) for e in g.entries}) == len(g)


# ---------------------------------------------------------------------------
# Normalization

class TestNormalization:
    def test_absolute_window(self):
        r = resolve_norm(vol(np.zeros((1, 4, 4))),
                         NormParams(lower_clip=10.0, upper_clip=20.0,
                                    upper_top_percent=None))
        assert (r.lower, r.upper, r.degenerate) == (10.0, 20.0, False)

    def test_percentile_window(self):
        data = np.arange(100, dtype=np.float64).reshape(1, 10, 10)
        r = resolve_norm(vol(data), NormParams(lower_clip=0.0,
                                               upper_top_percent=10.0))
        assert r.upper == pytest.approx(89.1)

    def test_degenerate_window_warns_and_zeroes(self):
        v = vol(np.full((2, 4, 4), 7.0))
        with pytest.warns(UserWarning, match="degenerate"):
            r = resolve_norm(v, NormParams(lower_clip=7.0, upper_top_percent=1.0))
        assert r.degenerate
        patch = extract_patch(v, (0, 0, 0), (2, 4, 4), r)
        assert patch.shape == (1, 2, 4, 4)
        assert (patch == 0).all()

    def test_params_validation(self):
        with pytest.raises(ValueError):
            NormParams(upper_clip=None, upper_top_percent=None)
        with pytest.raises(ValueError):
            NormParams(upper_top_percent=0.0)
        with pytest.raises(ValueError):
            NormParams(upper_top_percent=100.0)

    def test_clip_and_scale(self):
        data = np.array([[[0.0, 50.0], [100.0, 200.0]]])
        v = vol(data)
        r = resolve_norm(v, NormParams(lower_clip=50.0, upper_clip=150.0,
                                       upper_top_percent=None))
        patch = extract_patch(v, (0, 0, 0), (1, 2, 2), r)
        assert np.allclose(patch[0], [[0.0, 0.0], [0.5, 1.0]])

    def test_invert(self):
        data = np.array([[[0.0, 50.0], [100.0, 200.0]]])
        v = vol(data)
        r = resolve_norm(v, NormParams(lower_clip=50.0, upper_clip=150.0,
                                       upper_top_percent=None, invert=True))
        patch = extract_patch(v, (0, 0, 0), (1, 2, 2), r)
        assert np.allclose(patch[0], [[1.0, 1.0], [0.5, 0.0]])

    def test_multichannel_patch_shape(self):
        data = np.random.default_rng(0).integers(0, 100, (2, 4, 8, 8))
        v = Volume(data=data.astype(np.uint16))
        r = resolve_norm(v, NormParams(lower_clip=0.0, upper_clip=100.0,
                                       upper_top_percent=None))
        patch = extract_patch(v, (1, 2, 2), (2, 4, 4), r)
        assert patch.shape == (2, 2, 4, 4)
        assert patch.min() >= 0.0 and patch.max() <= 1.0


# ---------------------------------------------------------------------------
# Augmentation

class TestAugment:
    def test_rotation_is_a_quarter_turn(self):
        patch = np.random.default_rng(3).random((1, 2, 8, 8))
        out = rotate_patch(patch, np.random.default_rng(5))
        variants = [np.rot90(patch, k, axes=(2, 3)) for k in range(4)]
        assert any(np.array_equal(out, v) for v in variants)

    def test_all_rotations_reachable(self):
        patch = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
        rng = np.random.default_rng(0)
        seen = set()
        for _ in range(200):
            out = rotate_patch(patch, rng)
            for k in range(4):
                if np.array_equal(out, np.rot90(patch, k, axes=(2, 3))):
                    seen.add(k)
        assert seen == {0, 1, 2, 3}

    def test_rotation_deterministic_under_seed(self):
        patch = np.random.default_rng(3).random((1, 2, 8, 8))
        a = rotate_patch(patch, np.random.default_rng(42))
        b = rotate_patch(patch, np.random.default_rng(42))
        assert np.array_equal(a, b)

    def test_jitter_bounds(self):
        patch = np.full((1, 2, 4, 4), 0.5)
        out = jitter_intensity(patch, np.random.default_rng(1), magnitude=0.05)
        assert out.min() >= 0.475 - 1e-12 and out.max() <= 0.525 + 1e-12

    def test_jitter_clips_to_unit_range(self):
        patch = np.full((1, 1, 2, 2), 0.99)
        for s in range(20):
            out = jitter_intensity(patch, np.random.default_rng(s), magnitude=0.5)
            assert out.max() <= 1.0 and out.min() >= 0.0


# ---------------------------------------------------------------------------
# Grid serialization

class TestGridIO:
    def test_cuboid_grid_roundtrip(self, tmp_path):
        m = full_stack(8, 16, 16, ref=4)
        g = build_patch_grid(m, "cuboids3d", (4, 8, 8), overlaps=(2, 0, 0))
        path = tmp_path / "grid.tsv"
        write_patch_grid(g, path)
        back = read_patch_grid(path)
        assert back.mode == g.mode
        assert back.patch_shape == g.patch_shape
        assert back.overlaps == g.overlaps
        assert back.reference_plane == g.reference_plane
        assert np.array_equal(back.entries, g.entries)

    def test_plane_grid_roundtrip_without_reference(self, tmp_path):
        m = full_stack(3, 8, 8)
        g = build_patch_grid(m, "planes2d", (1, 8, 8))
        path = tmp_path / "grid.tsv"
        write_patch_grid(g, path)
        back = read_patch_grid(path)
        assert back.reference_plane is None
        assert np.array_equal(back.entries, g.entries)

    def test_empty_grid_roundtrip(self, tmp_path):
        g = PatchGrid(mode="planes2d", patch_shape=(1, 8, 8))
        path = tmp_path / "grid.tsv"
        write_patch_grid(g, path)
        back = read_patch_grid(path)
        assert len(back) == 0
        assert back.entries.shape == (0, 3)
