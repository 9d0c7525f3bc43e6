import numpy as np
import pytest

from voxdet.annotation import (
    LabelMap,
    NoiseSpec,
    corrupt_boxes,
    mask_to_boxes,
)
from voxdet.geometry import Box3, VolumeMeta, iou

from oracles import flood_fill_components


def label_map(grid, spacing=(1.0, 1.0, 1.0)):
    grid = np.asarray(grid, dtype=np.int64)
    return LabelMap(VolumeMeta(grid.shape, spacing), grid)


def random_blob_map(rng, size=16, p=0.12, labels=1):
    grid = (rng.random((size, size, size)) < p).astype(np.int64)
    if labels > 1:
        grid *= rng.integers(1, labels + 1, size=grid.shape)
    return label_map(grid)


def components_as_set(comps):
    return {(c.label, c.box.min + c.box.max, c.voxel_count) for c in comps}


class TestMaskToBoxes:
    def test_single_voxel(self):
        grid = np.zeros((6, 6, 6), dtype=np.int64)
        grid[2, 3, 4] = 1
        comps = mask_to_boxes(label_map(grid))
        assert len(comps) == 1
        assert comps[0].box == Box3((2, 3, 4), (3, 4, 5))
        assert comps[0].voxel_count == 1

    def test_diagonal_voxels_connectivity(self):
        grid = np.zeros((4, 4, 4), dtype=np.int64)
        grid[0, 0, 0] = 1
        grid[1, 1, 1] = 1
        assert len(mask_to_boxes(label_map(grid), connectivity=26)) == 1
        assert len(mask_to_boxes(label_map(grid), connectivity=6)) == 2

    def test_all_background(self):
        grid = np.zeros((4, 4, 4), dtype=np.int64)
        assert mask_to_boxes(label_map(grid)) == []

    def test_touching_labels_stay_separate(self):
        grid = np.zeros((2, 2, 4), dtype=np.int64)
        grid[:, :, :2] = 1
        grid[:, :, 2:] = 2
        comps = mask_to_boxes(label_map(grid))
        assert len(comps) == 2
        assert {c.label for c in comps} == {1, 2}

    def test_matches_flood_fill_oracle(self):
        rng = np.random.default_rng(91)
        for trial in range(20):
            lm = random_blob_map(rng, labels=2)
            for conn in (6, 26):
                got = components_as_set(mask_to_boxes(lm, conn))
                want = {
                    (label, box, count)
                    for label, box, count in flood_fill_components(lm.grid, conn)
                }
                assert got == want, f"trial {trial} connectivity {conn}"

    def test_26_component_count_at_most_6(self):
        rng = np.random.default_rng(92)
        for _ in range(10):
            lm = random_blob_map(rng)
            assert len(mask_to_boxes(lm, 26)) <= len(mask_to_boxes(lm, 6))

    def test_boxes_are_tight(self):
        rng = np.random.default_rng(93)
        lm = random_blob_map(rng)
        for comp in mask_to_boxes(lm, 26):
            lo = tuple(int(v) for v in comp.box.min)
            hi = tuple(int(v) for v in comp.box.max)
            sub = lm.grid[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] == comp.label
            # every face slab of the box contains at least one voxel
            assert sub[0].any() and sub[-1].any()
            assert sub[:, 0].any() and sub[:, -1].any()
            assert sub[:, :, 0].any() and sub[:, :, -1].any()

    def test_connectivity_validated(self):
        grid = np.zeros((2, 2, 2), dtype=np.int64)
        with pytest.raises(ValueError):
            mask_to_boxes(label_map(grid), connectivity=18)

    def test_grid_shape_must_match_meta(self):
        with pytest.raises(ValueError):
            LabelMap(VolumeMeta((2, 2, 2), (1, 1, 1)), np.zeros((2, 2, 3), np.int64))


def random_boxes(rng, n, center_span=60.0, ext_lo=2.0, ext_hi=30.0):
    out = []
    for _ in range(n):
        c = rng.uniform(0, center_span, size=3)
        s = rng.uniform(ext_lo, ext_hi, size=3)
        out.append(Box3.from_center_size(c, s))
    return out


class TestCorruptBoxes:
    def test_zero_magnitude_is_identity(self):
        rng = np.random.default_rng(1)
        boxes = random_boxes(rng, 20)
        for mode in ("shrink", "enlarge", "shift"):
            res = corrupt_boxes(boxes, NoiseSpec(mode, 0.0, seed=4))
            assert res.mean_iou == 1.0
            assert res.boxes == boxes

    def test_same_seed_bit_identical(self):
        rng = np.random.default_rng(2)
        boxes = random_boxes(rng, 50)
        for mode in ("shrink", "enlarge", "shift", "drop"):
            a = corrupt_boxes(boxes, NoiseSpec(mode, 0.1, seed=9), (5, 0.5, 0.5))
            b = corrupt_boxes(boxes, NoiseSpec(mode, 0.1, seed=9), (5, 0.5, 0.5))
            assert a.boxes == b.boxes
            assert a.mean_iou == b.mean_iou
            assert a.kept_indices == b.kept_indices

    def test_shrink_stays_inside_original(self):
        rng = np.random.default_rng(3)
        boxes = random_boxes(rng, 100)
        res = corrupt_boxes(boxes, NoiseSpec("shrink", 0.3, seed=1))
        for orig, new in zip(boxes, res.boxes):
            assert orig.contains_box(new)

    def test_enlarge_contains_original(self):
        rng = np.random.default_rng(4)
        boxes = random_boxes(rng, 100)
        res = corrupt_boxes(boxes, NoiseSpec("enlarge", 0.3, seed=1))
        for orig, new in zip(boxes, res.boxes):
            assert new.contains_box(orig)

    def test_shift_preserves_extents(self):
        rng = np.random.default_rng(5)
        boxes = random_boxes(rng, 100)
        res = corrupt_boxes(boxes, NoiseSpec("shift", 0.3, seed=1))
        for orig, new in zip(boxes, res.boxes):
            for a, b in zip(orig.extents, new.extents):
                assert a == pytest.approx(b, rel=1e-12)

    def test_shrink_clamps_at_one_voxel(self):
        thin = Box3((0, 0, 0), (1.0, 20, 20))
        res = corrupt_boxes([thin] * 10, NoiseSpec("shrink", 0.5, seed=2))
        assert res.clamped == 10
        for b in res.boxes:
            assert b.extents[0] == 1.0

    def test_mean_iou_is_geometry_iou_average(self):
        rng = np.random.default_rng(6)
        boxes = random_boxes(rng, 40)
        res = corrupt_boxes(boxes, NoiseSpec("shift", 0.2, seed=3))
        manual = np.mean([iou(boxes[i], b)
                          for i, b in zip(res.kept_indices, res.boxes)])
        assert res.mean_iou == pytest.approx(manual, abs=0)

    def test_drop_rates_by_size_bin(self):
        spacing = (1.0, 1.0, 1.0)
        # volumes: 500 voxels = 0.5 cm^3, 5000 = 5 cm^3, 50000 = 50 cm^3
        small = [Box3((0, 0, 0), (5, 10, 10))] * 3000
        mid = [Box3((0, 0, 0), (5, 10, 100))] * 3000
        big = [Box3((0, 0, 0), (5, 100, 100))] * 3000
        spec = NoiseSpec("drop", drop_rates=(0.2, 0.1), seed=12)
        r_small = corrupt_boxes(small, spec, spacing)
        r_mid = corrupt_boxes(mid, spec, spacing)
        r_big = corrupt_boxes(big, spec, spacing)
        assert r_small.dropped / 3000 == pytest.approx(0.2, abs=0.03)
        assert r_mid.dropped / 3000 == pytest.approx(0.1, abs=0.03)
        assert r_big.dropped == 0
        assert r_small.mean_iou == 1.0  # survivors untouched

    def test_drop_requires_spacing(self):
        with pytest.raises(ValueError):
            corrupt_boxes([Box3((0, 0, 0), (1, 1, 1))], NoiseSpec("drop", seed=0))

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            NoiseSpec("explode")
        with pytest.raises(ValueError):
            NoiseSpec("shrink", magnitude=1.0)
        with pytest.raises(ValueError):
            NoiseSpec("drop", drop_rates=(1.5, 0.1))
        with pytest.raises(ValueError):
            NoiseSpec("drop", drop_bins_cm3=(10.0, 1.0))

    def test_monte_carlo_means_match_closed_form(self):
        # sanity at module scale; the acceptance suite runs the large
        # version against the published statistics
        rng = np.random.default_rng(7)
        boxes = random_boxes(rng, 20000, ext_lo=3.0)
        shrink = corrupt_boxes(boxes, NoiseSpec("shrink", 0.1, seed=21))
        enlarge = corrupt_boxes(boxes, NoiseSpec("enlarge", 0.1, seed=22))
        # E[prod U(0.9, 1)] = 0.95^3; E[prod 1/U(1, 1.1)] = (10 ln 1.1)^3
        assert shrink.mean_iou == pytest.approx(0.95**3, abs=0.002)
        assert enlarge.mean_iou == pytest.approx((10 * np.log(1.1)) ** 3, abs=0.002)
