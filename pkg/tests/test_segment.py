"""Otsu/Yen thresholding against exhaustive criterion sweeps, and the
keypoint-guided component filter."""
import numpy as np
import pytest

from longreg.keypoints import KeypointSet, voxel_to_norm
from longreg.segment import keypoint_filter_components, otsu_threshold, threshold_segment, yen_threshold
from longreg.volume import Volume

from oracles import sweep_otsu, sweep_yen


def bimodal(rng, shape=(12, 12, 12), lo=0.1, hi=0.9, p=0.3):
    return np.where(rng.random(shape) < p, hi, lo) + rng.normal(0, 0.01, shape)


class TestThresholds:
    def test_two_value_image_threshold_strictly_between_modes(self):
        data = np.full((10, 10, 10), 0.2)
        data[:3] = 0.8
        for fn in (otsu_threshold, yen_threshold):
            thr = fn(data)
            assert 0.2 < thr < 0.8

    def test_otsu_equals_exhaustive_sweep(self, rng):
        for trial in range(12):
            data = bimodal(rng, p=float(rng.uniform(0.1, 0.6)))
            assert otsu_threshold(data) == pytest.approx(sweep_otsu(data), abs=0)

    def test_yen_equals_exhaustive_sweep(self, rng):
        for trial in range(12):
            data = bimodal(rng, p=float(rng.uniform(0.1, 0.6)))
            assert yen_threshold(data) == pytest.approx(sweep_yen(data), abs=0)

    def test_thresholds_on_smooth_random_volumes(self, rng):
        for trial in range(8):
            data = rng.random((10, 10, 10))
            assert otsu_threshold(data) == sweep_otsu(data)
            assert yen_threshold(data) == sweep_yen(data)

    def test_constant_image_raises_in_threshold_fn(self):
        with pytest.raises(ValueError, match="constant"):
            otsu_threshold(np.full((5, 5, 5), 0.5))


class TestThresholdSegment:
    def test_binary_output(self, rng):
        vol = Volume(bimodal(rng).astype(np.float32))
        mask = threshold_segment(vol, "otsu")
        assert mask.is_binary()

    def test_constant_image_warns_and_returns_empty(self):
        vol = Volume(np.full((6, 6, 6), 0.4, dtype=np.float32))
        with pytest.warns(UserWarning, match="constant"):
            mask = threshold_segment(vol, "yen")
        assert not mask.data.any()

    def test_unknown_method_rejected(self):
        with pytest.raises(ValueError, match="method"):
            threshold_segment(Volume(np.zeros((4, 4, 4), dtype=np.float32)), "other")


def _kp_at_voxel(voxel, shape):
    return KeypointSet(voxel_to_norm(np.asarray(voxel, dtype=float), shape)[None], role="abnormal")


class TestKeypointFilter:
    def _two_components(self):
        mask = np.zeros((16, 16, 16), dtype=np.uint8)
        mask[2:6, 2:6, 2:6] = 1
        mask[10:14, 10:14, 10:14] = 1
        return mask

    def test_single_component_containing_keypoint_unchanged(self):
        mask = np.zeros((12, 12, 12), dtype=np.uint8)
        mask[4:8, 4:8, 4:8] = 1
        out = keypoint_filter_components(Volume(mask), _kp_at_voxel((5, 5, 5), mask.shape))
        assert np.array_equal(out.data, mask)

    def test_other_component_removed(self):
        mask = self._two_components()
        out = keypoint_filter_components(Volume(mask), _kp_at_voxel((4, 4, 4), mask.shape))
        assert out.data[3, 3, 3] == 1
        assert not out.data[10:14, 10:14, 10:14].any()

    def test_keypoint_within_tolerance_hits(self):
        mask = self._two_components()
        # keypoint 2 voxels outside the first block still selects it
        out = keypoint_filter_components(Volume(mask), _kp_at_voxel((7, 5, 5), mask.shape), tolerance=2.0)
        assert out.data[3, 3, 3] == 1

    def test_no_hit_warns_and_empties(self):
        mask = self._two_components()
        with pytest.warns(UserWarning, match="no component"):
            out = keypoint_filter_components(Volume(mask), _kp_at_voxel((8, 8, 8), mask.shape))
        assert not out.data.any()

    def test_26_connectivity(self):
        # two voxels touching only at a corner are one 26-connected
        # component, so the filter keeps both
        mask = np.zeros((8, 8, 8), dtype=np.uint8)
        mask[3, 3, 3] = 1
        mask[4, 4, 4] = 1
        out = keypoint_filter_components(Volume(mask), _kp_at_voxel((3, 3, 3), mask.shape))
        assert out.data.sum() == 2
