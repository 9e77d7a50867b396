"""Stage-2 ROI tensors: layout, borders, augmentation and the disk cache."""
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from radhop.net import map_residue, predict_residue
from radhop.patches import (GRID, RoiPatchTensor, augment_roi_patch, augmented_patch,
                            extract_roi_patch, load_patch_cache, save_patch_cache,
                            stack_patches)
from radhop.radiomics import extract_window_features
from radhop.stage1 import RoiRecord
from radhop.volume import MODALITIES


def _roi(z, y, x, residue=0.4, p=0.6):
    return RoiRecord(1, np.array([[z, y, x]]), (z, y, x), p, (y, x), 1, residue)


@pytest.fixture(scope="module")
def setup(small_data, small_stage1):
    return small_data["train"][0], small_stage1.radiomics


class TestExtract:
    def test_shape(self, setup):
        case, models = setup
        p = extract_roi_patch(case, _roi(1, 28, 28), models)
        assert p.grid.shape == (13, 13, 60) and GRID * GRID == 169
        assert p.roi_ref == (case.case_id, 1)
        assert p.target == pytest.approx(0.7)

    def test_corner_roi(self, setup):
        case, models = setup
        p = extract_roi_patch(case, _roi(0, 0, 0), models)
        assert p.grid.shape == (13, 13, 60) and np.isfinite(p.grid).all()

    @pytest.mark.parametrize("i,j", [(0, 0), (6, 6), (12, 3)])
    def test_grid_layout(self, setup, i, j):
        case, models = setup
        cy, cx = 30, 26
        p = extract_roi_patch(case, _roi(2, cy, cx), models)
        # region pixel (4i+12, 4j+12) is image pixel (cy-36+4i+12, cx-36+4j+12)
        center = (cy - 36 + 4 * i + 12, cx - 36 + 4 * j + 12)
        expect = []
        for m, name in enumerate(MODALITIES):
            img = case.volumes[m].values[2]
            # replicate the region's own edge padding before recomputing the window
            pad = np.pad(np.asarray(img, np.float64), 36, mode="edge")
            raw = extract_window_features(models[name].radhop, pad, (center[0] + 36, center[1] + 36))
            expect.append(models[name].compact(raw[None])[0])
        np.testing.assert_allclose(p.grid[i, j], np.concatenate(expect), rtol=1e-10, atol=1e-10)


class TestAugment:
    def test_identity_is_bitwise_extract(self, setup):
        case, models = setup
        roi = _roi(1, 30, 30)
        a = augmented_patch(case, roi, models)
        b = extract_roi_patch(case, roi, models)
        assert np.array_equal(a.grid, b.grid)

    def test_integer_shift(self, setup):
        case, models = setup
        roi = _roi(1, 27, 26)
        a = augmented_patch(case, roi, models, shift=(3, 0))
        b = extract_roi_patch(case, _roi(1, 30, 26), models)
        np.testing.assert_allclose(a.grid, b.grid, atol=1e-6)

    def test_seeded(self, setup):
        case, models = setup
        roi = _roi(1, 30, 30)
        a = augment_roi_patch(case, roi, models, np.random.default_rng(9))
        b = augment_roi_patch(case, roi, models, np.random.default_rng(9))
        assert np.array_equal(a.grid, b.grid) and a.augmentation_tag == b.augmentation_tag

    def test_target_unchanged(self, setup):
        case, models = setup
        roi = _roi(1, 30, 30, residue=-0.8)
        rng = np.random.default_rng(1)
        for _ in range(3):
            assert augment_roi_patch(case, roi, models, rng).target == extract_roi_patch(case, roi, models).target

    def test_double_flip_is_identity(self, setup):
        case, models = setup
        roi = _roi(1, 30, 30)
        a = augmented_patch(case, roi, models, hflip=True, vflip=True, theta_deg=180.0)
        b = extract_roi_patch(case, roi, models)
        # flipping both axes equals a 180-degree turn, so the composition is the identity
        np.testing.assert_allclose(a.grid, b.grid, atol=1e-9)

    def test_shift_too_large(self, setup):
        case, models = setup
        with pytest.raises(ValueError):
            augmented_patch(case, _roi(1, 30, 30), models, shift=(13, 0))


@given(st.floats(-1, 1))
def test_mapping_round_trip(eps):
    assert abs(float(predict_residue(map_residue(eps, 0.0))) - eps) <= 1e-12


def test_mapping_clamps():
    assert map_residue(1.0) == 1 - 1e-4 and map_residue(-1.0) == 1e-4


def test_cache_round_trip(tmp_path, setup):
    case, models = setup
    patches = [extract_roi_patch(case, _roi(1, 30, 30), models),
               RoiPatchTensor(np.arange(13 * 13 * 60, dtype=np.float64).reshape(13, 13, 60),
                              ("c", 2), None, 0.2, 0, "hflip=1")]
    save_patch_cache(tmp_path / "cache.json", patches)
    back = load_patch_cache(tmp_path / "cache.json")
    np.testing.assert_array_equal(stack_patches(back), stack_patches(patches).astype(np.float32))
    assert [(p.roi_ref, p.target, p.augmentation_tag) for p in back] == \
        [(p.roi_ref, p.target, p.augmentation_tag) for p in patches]
