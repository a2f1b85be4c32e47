import numpy as np
import pytest

from voxelforge.patches import (
    AggregationBuffer,
    AnchorOutOfBounds,
    VolumeTooSmall,
    aggregate,
    anchor_lattice,
    extract_pairs,
    make_boost_weights,
)
from voxelforge.volume import IntensityDomain

from conftest import mask_volume, unit_volume


def unit_pair(shape, rng):
    mri = unit_volume(rng.random(shape).astype(np.float32))
    ct = unit_volume(rng.random(shape).astype(np.float32))
    return mri, ct


class TestAnchorLattice:
    def test_minimal_volume_single_anchor(self):
        assert anchor_lattice((32, 32, 32), stride=16) == [(8, 8, 8)]

    def test_48_cube_stride_8(self):
        anchors = anchor_lattice((48, 48, 48), stride=8)
        assert len(anchors) == 27
        per_axis = sorted({a[0] for a in anchors})
        assert per_axis == [8, 16, 24]

    def test_too_small_raises(self):
        with pytest.raises(VolumeTooSmall):
            anchor_lattice((31, 32, 32), stride=8)

    def test_clamped_final_anchor_dedup(self):
        anchors = anchor_lattice((50, 32, 32), stride=16)
        firsts = [a[0] for a in anchors]
        assert firsts == sorted(set(firsts))
        assert firsts[-1] == 50 - 24  # snapped inward


class TestExtractPairs:
    def test_single_pair_geometry(self, rng):
        mri, ct = unit_pair((32, 32, 32), rng)
        pairs = list(extract_pairs(mri, ct, stride=16))
        assert len(pairs) == 1
        pair = pairs[0]
        assert pair.anchor == (8, 8, 8)
        assert pair.input.shape == (32, 32, 32)
        assert pair.target.shape == (16, 16, 16)
        np.testing.assert_array_equal(pair.input, mri.voxels)
        np.testing.assert_array_equal(pair.target, ct.voxels[8:24, 8:24, 8:24])

    def test_target_centered_in_input(self, rng):
        mri, ct = unit_pair((48, 48, 48), rng)
        for pair in extract_pairs(mri, ct, stride=8):
            lo = tuple(a - 8 for a in pair.anchor)
            np.testing.assert_array_equal(
                pair.input,
                mri.voxels[lo[0]:lo[0]+32, lo[1]:lo[1]+32, lo[2]:lo[2]+32],
            )

    def test_grid_mismatch_rejected(self, rng):
        mri = unit_volume(rng.random((32, 32, 32)).astype(np.float32))
        ct = unit_volume(rng.random((32, 32, 33)).astype(np.float32))
        with pytest.raises(ValueError):
            list(extract_pairs(mri, ct))

    def test_deterministic_depth_major_order(self, rng):
        mri, ct = unit_pair((48, 48, 48), rng)
        anchors = [p.anchor for p in extract_pairs(mri, ct, stride=8)]
        assert anchors == sorted(anchors)

    def test_foreground_filter(self, rng):
        vox = np.zeros((48, 48, 48), dtype=np.float32)
        vox[20:44, 20:44, 20:44] = rng.random((24, 24, 24)).astype(np.float32) * 0.9 + 0.1
        mri = unit_volume(vox)
        ct = unit_volume(vox.copy())
        keep_all = list(extract_pairs(mri, ct, stride=8, min_foreground_fraction=0.0))
        filtered = list(extract_pairs(mri, ct, stride=8, min_foreground_fraction=0.2))
        assert 0 < len(filtered) < len(keep_all)


class TestAggregate:
    def test_single_constant_patch(self):
        patch = np.full((16, 16, 16), 5.0, dtype=np.float32)
        out = aggregate([(patch, (0, 0, 0))], (16, 16, 16))
        np.testing.assert_allclose(out.voxels, 5.0)

    def test_two_overlapping_patches_average(self):
        a = np.full((16, 16, 16), 1.0, dtype=np.float32)
        b = np.full((16, 16, 16), 3.0, dtype=np.float32)
        out = aggregate([(a, (0, 0, 0)), (b, (0, 0, 0))], (16, 16, 16))
        np.testing.assert_allclose(out.voxels, 2.0)

    def test_unit_patches_infer_unit_domain(self, rng):
        patch = rng.random((16, 16, 16)).astype(np.float32)
        out = aggregate([(patch, (0, 0, 0))], (16, 16, 16))
        assert out.intensity_domain is IntensityDomain.UNIT
        assert out.voxels.max() <= 1.0

    def test_uncovered_voxels_zero(self):
        patch = np.ones((16, 16, 16), dtype=np.float32)
        out = aggregate([(patch, (0, 0, 0))], (32, 32, 32))
        assert out.voxels[20, 20, 20] == 0.0

    def test_extract_aggregate_identity(self, rng):
        mri, ct = unit_pair((64, 64, 64), rng)
        buffer = AggregationBuffer((64, 64, 64))
        for pair in extract_pairs(mri, ct, stride=8):
            buffer.add(pair.target.astype(np.float64), pair.anchor)
        out = buffer.finalize()
        covered = buffer.coverage
        assert covered[8:56, 8:56, 8:56].all()
        diff = np.abs(out[covered] - ct.voxels[covered])
        assert diff.max() < 1e-6

    def test_order_independence(self, rng):
        mri, ct = unit_pair((48, 48, 48), rng)
        pairs = [(p.target, p.anchor) for p in extract_pairs(mri, ct, stride=8)]
        forward = aggregate(pairs, (48, 48, 48))
        backward = aggregate(pairs[::-1], (48, 48, 48))
        assert np.abs(forward.voxels - backward.voxels).max() < 1e-6

    def test_coverage_counts_match_brute_force(self, rng):
        anchors = [tuple(rng.integers(0, 17, size=3)) for _ in range(20)]
        buffer = AggregationBuffer((32, 32, 32))
        expected = np.zeros((32, 32, 32), dtype=np.int64)
        for anchor in anchors:
            buffer.add(np.ones((16, 16, 16)), anchor)
            d, h, w = anchor
            expected[d:d+16, h:h+16, w:w+16] += 1
        np.testing.assert_array_equal(buffer.weight, expected)

    def test_anchor_out_of_bounds(self):
        buffer = AggregationBuffer((16, 16, 16))
        with pytest.raises(AnchorOutOfBounds):
            buffer.add(np.ones((16, 16, 16)), (1, 0, 0))

    def test_center_tapered_identity_on_constant(self):
        patch = np.full((16, 16, 16), 0.5, dtype=np.float32)
        out = aggregate(
            [(patch, (0, 0, 0)), (patch, (0, 0, 8))],
            (16, 16, 24),
            patch_weight="center-tapered",
        )
        covered = out.voxels[out.voxels > 0]
        np.testing.assert_allclose(covered, 0.5, atol=1e-9)

    def test_merge_equals_single_buffer(self, rng):
        pairs = [
            (rng.random((16, 16, 16)), tuple(rng.integers(0, 17, size=3)))
            for _ in range(10)
        ]
        single = AggregationBuffer((32, 32, 32))
        for patch, anchor in pairs:
            single.add(patch, anchor)
        left = AggregationBuffer((32, 32, 32))
        right = AggregationBuffer((32, 32, 32))
        for patch, anchor in pairs[:5]:
            left.add(patch, anchor)
        for patch, anchor in pairs[5:]:
            right.add(patch, anchor)
        left.merge(right)
        np.testing.assert_allclose(left.finalize(), single.finalize(), atol=1e-12)


class TestBoostWeights:
    def test_zero_lambda_all_ones(self, rng):
        mask = mask_volume((rng.random((4, 4, 4)) > 0.5).astype(np.uint8))
        out = make_boost_weights(mask, 0.0)
        np.testing.assert_array_equal(out.weights, 1.0)

    def test_full_mask_lambda_one(self):
        mask = mask_volume(np.ones((3, 3, 3), dtype=np.uint8))
        out = make_boost_weights(mask, 1.0)
        np.testing.assert_array_equal(out.weights, 2.0)

    def test_checkerboard(self):
        grid = np.indices((4, 4, 4)).sum(axis=0) % 2
        mask = mask_volume(grid.astype(np.uint8))
        out = make_boost_weights(mask, 0.5)
        assert set(np.unique(out.weights)) == {1.0, 1.5}
        np.testing.assert_array_equal(out.weights == 1.5, grid == 1)
        assert out.weights.min() == 1.0

    def test_negative_lambda_rejected(self):
        mask = mask_volume(np.ones((2, 2, 2), dtype=np.uint8))
        with pytest.raises(ValueError):
            make_boost_weights(mask, -0.1)
