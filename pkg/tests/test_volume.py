"""Volumes, cases, preprocessing and the .mvol format."""
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from radhop.volume import (Case, PreprocessConfig, Volume, VolumeError, load_case, load_manifest,
                           normalize_percentile, preprocess_case, read_mvol, resample_nearest,
                           resample_trilinear, save_case, write_manifest, write_mvol)


def _case(dims=(4, 8, 8), lesion=None, seed=0):
    rng = np.random.default_rng(seed)
    vols = tuple(Volume(rng.random(dims).astype(np.float32), (3.0, 0.25, 0.25), m)
                 for m in ("t2w", "adc", "dwi"))
    return Case("c0", vols, lesion, np.ones(dims, bool))


def _percentile_oracle(values, q):
    # linear interpolation between order statistics at rank q/100 * (n - 1)
    s = sorted(float(v) for v in np.ravel(values))
    pos = q / 100.0 * (len(s) - 1)
    lo = int(pos)
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (pos - lo) * (s[hi] - s[lo])


class TestVolume:
    def test_rejects_bad_spacing(self):
        with pytest.raises(VolumeError):
            Volume(np.zeros((2, 2, 2)), (1.0, 0.0, 1.0))

    def test_rejects_non_finite_with_offset(self):
        v = np.zeros((2, 2, 2))
        v[1, 0, 1] = np.nan
        with pytest.raises(VolumeError, match="offset 5"):
            Volume(v, (1, 1, 1))

    def test_values_read_only(self):
        v = Volume(np.zeros((2, 2, 2)), (1, 1, 1))
        with pytest.raises(ValueError):
            v.values[0, 0, 0] = 1.0


class TestCase:
    def test_aligned_volumes(self):
        c = _case((16, 96, 96))
        assert c.dims == (16, 96, 96)

    def test_patient_label_from_lesions(self):
        lesion = np.zeros((4, 8, 8), int)
        lesion[1, 1, 1] = 1
        lesion[2, 5, 5] = 2
        assert _case(lesion=lesion).patient_label == 1
        assert _case(lesion=np.zeros((4, 8, 8), int)).patient_label == 0

    def test_dims_mismatch(self):
        a = Volume(np.zeros((16, 96, 96), np.float32), (3, .25, .25), "t2w")
        b = Volume(np.zeros((16, 96, 95), np.float32), (3, .25, .25), "adc")
        with pytest.raises(VolumeError, match="dims mismatch"):
            Case("x", (a, a, b))

    def test_non_contiguous_lesion_ids(self):
        lesion = np.zeros((4, 8, 8), int)
        lesion[0, 0, 0] = 2
        with pytest.raises(VolumeError, match="contiguous"):
            _case(lesion=lesion)


class TestResample:
    def test_identity_is_bitwise(self):
        v = _case().volumes[0]
        out = resample_trilinear(v, v.spacing_mm)
        assert np.array_equal(out.values, np.asarray(v.values, np.float64))

    def test_ramp_downsample(self):
        nx = 20
        ramp = np.broadcast_to(np.arange(nx, dtype=np.float64), (2, 3, nx)).copy()
        out = resample_trilinear(Volume(ramp, (1.0, 1.0, 1.0)), (1.0, 1.0, 2.0))
        assert out.dims == (2, 3, 10)
        # new voxel i sits at physical x = 2 i, where the ramp equals 2 i
        np.testing.assert_allclose(out.values[0, 0], 2.0 * np.arange(10), atol=1e-6)

    def test_constant_volume(self):
        v = Volume(np.full((3, 5, 7), 4.25), (3.0, 0.5, 0.5))
        out = resample_trilinear(v, (1.7, 0.3, 0.9))
        assert np.all(out.values == 4.25)

    def test_matches_map_coordinates(self):
        rng = np.random.default_rng(3)
        v = Volume(rng.random((5, 9, 11)), (2.0, 1.0, 1.0))
        out = resample_trilinear(v, (1.5, 0.7, 1.3))
        grids = np.meshgrid(*(np.arange(n) * t / s for n, t, s in
                              zip(out.dims, (1.5, 0.7, 1.3), (2.0, 1.0, 1.0))), indexing="ij")
        ref = ndimage.map_coordinates(np.asarray(v.values), grids, order=1, mode="nearest")
        np.testing.assert_allclose(out.values, ref, atol=1e-12)

    def test_output_dims_clamped(self):
        v = Volume(np.ones((1, 2, 2)), (1, 1, 1))
        assert resample_trilinear(v, (10, 10, 10)).dims == (1, 1, 1)

    def test_nearest_keeps_labels(self):
        labels = np.zeros((2, 8, 8), int)
        labels[:, 2:6, 2:6] = 3
        out = resample_nearest(labels, (1, 1, 1), (1, 2, 2))
        assert set(np.unique(out)) <= {0, 3}


class TestNormalize:
    def test_ramp_example(self):
        values = np.linspace(0, 100, 10201).reshape(1, 101, 101)
        out = normalize_percentile(Volume(values, (1, 1, 1)))
        a = _percentile_oracle(values, 0.05)
        b = _percentile_oracle(values, 99.5)
        idx = np.unravel_index(5100, values.shape)
        assert values[idx] == 50.0
        assert out.values[idx] == pytest.approx((50 - a) / (b - a), abs=1e-12)
        assert out.values[idx] == pytest.approx(0.5023, abs=1e-4)

    def test_constant_gives_zeros(self):
        out = normalize_percentile(Volume(np.full((2, 3, 4), 7.0), (1, 1, 1)))
        assert np.all(out.values == 0)

    def test_clamps(self):
        values = np.arange(1000, dtype=float).reshape(10, 10, 10)
        out = normalize_percentile(Volume(values, (1, 1, 1)))
        assert out.values.min() == 0.0 and out.values.max() == 1.0
        assert out.values[0, 0, 0] == 0.0 and out.values[-1, -1, -1] == 1.0

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0.01, 100), st.floats(-50, 50), st.integers(0, 10_000))
    def test_affine_invariance(self, alpha, beta, seed):
        x = np.random.default_rng(seed).normal(size=(3, 6, 6))
        a = normalize_percentile(Volume(x, (1, 1, 1))).values
        b = normalize_percentile(Volume(alpha * x + beta, (1, 1, 1))).values
        np.testing.assert_allclose(a, b, atol=1e-9)
        assert a.min() >= 0 and a.max() <= 1


class TestPreprocess:
    def test_resamples_masks_with_nearest(self):
        lesion = np.zeros((4, 8, 8), int)
        lesion[1:3, 2:6, 2:6] = 1
        c = _case(lesion=lesion)
        out = preprocess_case(c, PreprocessConfig(target_spacing_mm=(3.0, 0.5, 0.5)))
        assert out.dims == (4, 4, 4)
        assert out.lesion_mask.dtype == np.int32 and set(np.unique(out.lesion_mask)) == {0, 1}
        assert all(0 <= v.values.min() and v.values.max() <= 1 for v in out.volumes)

    def test_bad_percentiles(self):
        with pytest.raises(VolumeError):
            PreprocessConfig(lo_percentile=50, hi_percentile=10)


class TestFormats:
    def test_mvol_header_layout(self, tmp_path):
        values = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
        write_mvol(tmp_path / "v.mvol", values, (3, .25, .25), "t2w")
        raw = (tmp_path / "v.mvol").read_bytes()
        header, body = raw.split(b"\n", 1)
        h = json.loads(header)
        assert h == {"dims": [2, 3, 4], "spacing_mm": [3.0, 0.25, 0.25], "dtype": "f32le", "modality": "t2w"}
        assert body == values.astype("<f4").tobytes()

    def test_truncated_payload(self, tmp_path):
        write_mvol(tmp_path / "v.mvol", np.zeros((2, 2, 2), np.float32), (1, 1, 1), "t2w")
        data = (tmp_path / "v.mvol").read_bytes()
        (tmp_path / "v.mvol").write_bytes(data[:-4])
        with pytest.raises(VolumeError, match="payload"):
            read_mvol(tmp_path / "v.mvol")

    def test_case_round_trip_bit_exact(self, tmp_path):
        lesion = np.zeros((4, 8, 8), int)
        lesion[1, 2:4, 2:4] = 1
        c = _case(lesion=lesion)
        entry = save_case(c, tmp_path / "c0")
        write_manifest(tmp_path / "m.json", [entry])
        back = load_manifest(tmp_path / "m.json")[0]
        assert all(a == b for a, b in zip(c.volumes, back.volumes))
        assert np.array_equal(back.lesion_mask, c.lesion_mask)
        assert np.array_equal(back.gland_mask, c.gland_mask)

    def test_missing_file(self, tmp_path):
        entry = {"case_id": "x", "t2w": "a.mvol", "adc": "b.mvol", "dwi": "c.mvol"}
        with pytest.raises(VolumeError, match="missing"):
            load_case(entry, tmp_path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(VolumeError, match="missing manifest"):
            load_manifest(tmp_path / "nope.json")
