import numpy as np
import pytest

from voxelforge.morph import (
    EmptyForeground,
    EmptyVolume,
    RangeOutOfBounds,
    TrimEntry,
    clean_ct,
    default_clean_threshold,
    fill_holes,
    largest_component,
    trim_slices,
)
import oracles
from conftest import mask_volume, raw_volume


def ring_slice(size=8):
    """A 2D ring of ones with a hollow centre, embedded in one slice."""
    arr = np.zeros((size, size), dtype=np.uint8)
    arr[1:-1, 1:-1] = 1
    arr[3:-3, 3:-3] = 0
    return arr


class TestFillHoles:
    def test_all_zero_unchanged(self):
        m = mask_volume(np.zeros((4, 4, 4), dtype=np.uint8))
        out = fill_holes(m)
        np.testing.assert_array_equal(out.voxels, 0)

    def test_ring_becomes_solid(self):
        # a closed 3D box with a hollow interior fills up
        arr = np.zeros((8, 8, 8), dtype=np.uint8)
        arr[1:-1, 1:-1, 1:-1] = 1
        arr[3:-3, 3:-3, 3:-3] = 0
        out = fill_holes(mask_volume(arr))
        expected = np.zeros_like(arr)
        expected[1:-1, 1:-1, 1:-1] = 1
        np.testing.assert_array_equal(out.voxels, expected)

    def test_cavity_with_channel_to_border_unchanged(self):
        arr = np.zeros((8, 8, 8), dtype=np.uint8)
        arr[1:-1, 1:-1, 1:-1] = 1
        arr[3:-3, 3:-3, 3:-3] = 0
        arr[4, 4, 3:] = 0  # one-voxel channel from the cavity to the border
        out = fill_holes(mask_volume(arr))
        np.testing.assert_array_equal(out.voxels, arr)

    def test_connectivity_changes_reachability(self):
        # a diagonal-only gap: background escapes under 26-connectivity
        arr = np.ones((3, 3, 3), dtype=np.uint8)
        arr[1, 1, 1] = 0
        arr[0, 0, 0] = 0
        arr[0, 1, 1] = 1
        out_face = fill_holes(mask_volume(arr), "face")
        assert out_face.voxels[1, 1, 1] == 1  # sealed under face connectivity

    def test_idempotent_and_monotone(self, rng):
        for _ in range(25):
            arr = (rng.random((6, 6, 6)) > 0.6).astype(np.uint8)
            m = mask_volume(arr)
            once = fill_holes(m)
            twice = fill_holes(once)
            np.testing.assert_array_equal(once.voxels, twice.voxels)
            assert np.all(once.voxels >= arr)

    @pytest.mark.parametrize("connectivity", ["face", "face+edge+corner"])
    def test_matches_flood_fill_oracle(self, rng, connectivity):
        for _ in range(100):
            arr = (rng.random((8, 8, 8)) > 0.55).astype(np.uint8)
            out = fill_holes(mask_volume(arr), connectivity)
            expected = np.array(oracles.flood_fill_holes_oracle(arr, connectivity))
            np.testing.assert_array_equal(out.voxels, expected)

    def test_border_background_never_modified(self, rng):
        for _ in range(50):
            arr = (rng.random((6, 6, 6)) > 0.5).astype(np.uint8)
            out = fill_holes(mask_volume(arr))
            reached = np.array(oracles.flood_fill_holes_oracle(arr)) == arr
            # voxels the oracle left as border-connected background stay 0
            border_bg = (arr == 0) & (np.array(oracles.flood_fill_holes_oracle(arr)) == 0)
            assert np.all(out.voxels[border_bg] == 0)


class TestCleanCt:
    def make_head_and_table(self):
        vox = np.zeros((6, 32, 32), dtype=np.uint16)
        vox[1:5, 4:20, 4:28] = 30000  # head blob
        vox[2:4, 8:16, 8:24] = 45000  # brighter interior
        vox[1:5, 26:28, 2:30] = 20000  # thin table strip, separate component
        return raw_volume(vox)

    def test_table_removed_head_kept(self):
        ct = self.make_head_and_table()
        cleaned, mask = clean_ct(ct, threshold=10000)
        assert mask.voxels[2, 10, 10] == 1
        assert mask.voxels[2, 27, 16] == 0  # table suppressed
        assert cleaned.voxels[2, 27, 16] == 0
        assert cleaned.voxels[2, 10, 10] == ct.voxels[2, 10, 10]

    def test_threshold_above_max_errors(self):
        ct = self.make_head_and_table()
        with pytest.raises(EmptyForeground):
            clean_ct(ct, threshold=70000)

    def test_all_foreground_identity(self):
        vox = np.full((3, 4, 4), 500, dtype=np.uint16)
        ct = raw_volume(vox)
        cleaned, mask = clean_ct(ct, threshold=100)
        np.testing.assert_array_equal(mask.voxels, 1)
        np.testing.assert_array_equal(cleaned.voxels, vox)

    def test_zero_exactly_outside_mask(self, rng):
        vox = (rng.random((5, 16, 16)) * 40000).astype(np.uint16)
        ct = raw_volume(vox)
        cleaned, mask = clean_ct(ct)
        np.testing.assert_array_equal(cleaned.voxels[mask.voxels == 0], 0)
        inside = mask.voxels == 1
        np.testing.assert_array_equal(cleaned.voxels[inside], vox[inside])

    def test_default_threshold_tracks_range(self):
        ct = self.make_head_and_table()
        assert default_clean_threshold(ct) == pytest.approx(4500.0)

    def test_mask_holes_filled(self):
        vox = np.zeros((5, 10, 10), dtype=np.uint16)
        vox[1:4, 1:9, 1:9] = 30000
        vox[2, 4:6, 4:6] = 0  # dark interior cavity
        cleaned, mask = clean_ct(raw_volume(vox), threshold=1000)
        assert mask.voxels[2, 4, 4] == 1  # cavity belongs to the head mask
        assert cleaned.voxels[2, 4, 4] == 0  # but stays dark in the volume


class TestLargestComponent:
    def test_empty_mask_errors(self):
        with pytest.raises(EmptyForeground):
            largest_component(mask_volume(np.zeros((3, 3, 3), dtype=np.uint8)))


class TestTrimSlices:
    def test_depth_reduction_matches_dataset_row(self):
        v = raw_volume(np.zeros((161, 4, 4), dtype=np.uint16))
        out = trim_slices(v, [(0, 24)])
        assert out.depth == 137

    def test_empty_manifest_identity(self, rng):
        v = raw_volume((rng.random((5, 3, 3)) * 100).astype(np.uint16))
        out = trim_slices(v, [])
        np.testing.assert_array_equal(out.voxels, v.voxels)

    def test_refuses_to_delete_everything(self):
        v = raw_volume(np.zeros((5, 3, 3), dtype=np.uint16))
        with pytest.raises(EmptyVolume):
            trim_slices(v, [(0, 5)])

    def test_out_of_bounds_errors(self):
        v = raw_volume(np.zeros((5, 3, 3), dtype=np.uint16))
        with pytest.raises(RangeOutOfBounds):
            trim_slices(v, [(3, 7)])

    def test_overlap_rejected(self):
        with pytest.raises(RangeOutOfBounds):
            TrimEntry("s", ((0, 3), (2, 5)))

    def test_order_preserved_and_origin_shifts(self, rng):
        data = np.arange(8 * 2 * 2, dtype=np.uint16).reshape(8, 2, 2)
        v = raw_volume(data, spacing=(2.0, 1.0, 1.0), origin=(0.0, 0.0, 5.0))
        out = trim_slices(v, [(0, 2), (4, 6)])
        assert out.depth == 4
        np.testing.assert_array_equal(out.voxels, data[[2, 3, 6, 7]])
        # first retained slice was index 2, two depth steps of 2 mm along z
        np.testing.assert_allclose(out.origin, [0.0, 0.0, 9.0])
        # retained leading slices keep their world position
        np.testing.assert_allclose(
            out.index_to_world(np.zeros(3)), v.index_to_world(np.array([2.0, 0, 0]))
        )

    def test_total_matches_entry(self):
        entry = TrimEntry("s", ((0, 3), (10, 14)))
        assert entry.total == 7
