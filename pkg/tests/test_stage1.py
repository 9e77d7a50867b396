"""Stage 1: sampling, heatmaps, ROI extraction and labeling."""
from collections import deque
from itertools import product

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from radhop.classifier import GradientBoostingVoxelClassifier
from radhop.phantom import generate_phantom_case
from radhop.pipeline import preprocess
from radhop.stage1 import (Heatmap, RoiRecord, extract_rois, label_rois, predict_heatmap,
                           rois_from_json, rois_to_json, sample_voxels,
                           slice_selected_features)


def _hm(values):
    return Heatmap(np.asarray(values, dtype=np.float64), 1, "t")


def _flood_components(mask):
    """Brute-force 26-connected components by breadth-first search."""
    seen = np.zeros(mask.shape, bool)
    comps = []
    offsets = [d for d in product((-1, 0, 1), repeat=3) if d != (0, 0, 0)]
    for start in map(tuple, np.argwhere(mask)):
        if seen[start]:
            continue
        seen[start] = True
        queue, comp = deque([start]), []
        while queue:
            v = queue.popleft()
            comp.append(v)
            for d in offsets:
                w = tuple(a + b for a, b in zip(v, d))
                if all(0 <= c < n for c, n in zip(w, mask.shape)) and mask[w] and not seen[w]:
                    seen[w] = True
                    queue.append(w)
        comps.append(frozenset(comp))
    return comps


class TestExtractRois:
    def test_two_blobs(self):
        h = np.zeros((3, 12, 12))
        h[1, 1:4, 1:4] = 0.9
        h[1, 7:10, 7:10] = 0.5
        rois = extract_rois(_hm(h), 0.3, 8)
        assert sorted(r.p_roi for r in rois) == [0.5, 0.9]

    def test_below_threshold(self):
        assert extract_rois(_hm(np.full((2, 8, 8), 0.29)), 0.3, 1) == []

    def test_threshold_inclusive(self):
        assert len(extract_rois(_hm(np.full((2, 4, 4), 0.3)), 0.3, 1)) == 1

    def test_diagonal_chain_is_one_roi(self):
        h = np.zeros((3, 6, 6))
        for i in range(3):
            h[i, i, i] = h[i, i + 1, i + 1] = h[i, i + 2, i + 2] = 0.8
        comps = _flood_components(h >= 0.3)
        assert len(comps) == 1
        rois = extract_rois(_hm(h), 0.3, 1)
        assert len(rois) == 1 and len(rois[0].voxels) == 9

    def test_min_voxels(self):
        h = np.zeros((1, 10, 10))
        h[0, 0, :7] = 0.8
        h[0, 5, :8] = 0.8
        rois = extract_rois(_hm(h), 0.3, 8)
        assert len(rois) == 1 and len(rois[0].voxels) == 8

    def test_peak_tie_and_centroid(self):
        h = np.zeros((2, 8, 8))
        h[0, 2:5, 2:5] = 0.7
        h[1, 2:4, 2:6] = 0.7
        roi = extract_rois(_hm(h), 0.3, 1)[0]
        assert roi.peak == (0, 2, 2)
        assert roi.centroid_inplane == (3, 3)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.2, 0.8))
    def test_matches_flood_fill(self, seed, threshold):
        rng = np.random.default_rng(seed)
        h = rng.uniform(size=(3, 7, 7)) ** 3
        rois = extract_rois(_hm(h), threshold, 1)
        got = {frozenset(map(tuple, r.voxels)) for r in rois}
        assert got == set(_flood_components(h >= threshold))
        for r in rois:
            assert r.p_roi == h[tuple(r.voxels.T)].max() == h[r.peak]
        # components partition the above-threshold set
        assert sum(len(r.voxels) for r in rois) == int((h >= threshold).sum())


class TestLabelRois:
    @pytest.mark.parametrize("inside,p,eps", [(True, 0.3, 0.7), (False, 0.6, -0.6), (True, 1.0, 0.0)])
    def test_residue(self, inside, p, eps):
        mask = np.zeros((1, 4, 4), np.int32)
        mask[0, 1, 1] = int(inside)
        roi = RoiRecord(1, np.array([[0, 1, 1]]), (0, 1, 1), p, (1, 1))
        out = label_rois([roi], mask)[0]
        assert out.y_roi == int(inside)
        assert out.residue == pytest.approx(eps, abs=1e-15)

    def test_misaligned_mask(self):
        roi = RoiRecord(1, np.array([[0, 5, 5]]), (0, 5, 5), 0.5, (5, 5))
        with pytest.raises(ValueError):
            label_rois([roi], np.zeros((1, 4, 4)))

    def test_json_round_trip(self):
        roi = RoiRecord(3, np.array([[0, 1, 2], [0, 1, 3]]), (0, 1, 2), 0.75, (1, 2), 1, 0.25)
        back = rois_from_json(rois_to_json([roi]))[0]
        assert back.to_dict() == roi.to_dict()


class TestSampling:
    def test_no_lesion_case(self, small_cfg):
        case = generate_phantom_case(small_cfg.phantom, 3, n_lesions=0)
        pts, y = sample_voxels(case, 10, 25, 0)
        assert y.sum() == 0 and len(y) == 25
        assert case.gland_mask[tuple(pts.T)].all()

    def test_deterministic(self, small_cfg):
        case = generate_phantom_case(small_cfg.phantom, 4, n_lesions=1)
        a, b = sample_voxels(case, 10, 20, 5), sample_voxels(case, 10, 20, 5)
        np.testing.assert_array_equal(a[0], b[0])


class TestHeatmap:
    def test_stride_one_is_dense(self, small_data, small_stage1):
        case = small_data["train"][0]
        s1 = small_stage1
        h = predict_heatmap(case, s1.radiomics, s1.classifier, stride=1)
        z = int(np.argmax(case.gland_mask.sum((1, 2))))
        pts = np.argwhere(case.gland_mask[z])
        dense = s1.classifier.predict_proba(slice_selected_features(case, s1.radiomics, z, pts))[:, 1]
        np.testing.assert_allclose(h.values[z][tuple(pts.T)], dense, rtol=0, atol=1e-12)

    def test_outside_mask_is_zero(self, small_data, small_stage1):
        case = small_data["val"][0]
        h = predict_heatmap(case, small_stage1.radiomics, small_stage1.classifier, stride=4)
        assert np.all(h.values[~case.gland_mask] == 0.0)
        assert 0 <= h.values.min() and h.values.max() <= 1

    def test_threads_do_not_change_output(self, small_data, small_stage1):
        case = small_data["val"][0]
        s1 = small_stage1
        a = predict_heatmap(case, s1.radiomics, s1.classifier, 4, threads=1)
        b = predict_heatmap(case, s1.radiomics, s1.classifier, 4, threads=3)
        np.testing.assert_array_equal(a.values, b.values)

    def test_background_phantom_yields_no_rois(self, small_cfg, small_data, small_stage1):
        # a classifier fitted to a ~0.5% base rate with no rounds predicts that rate everywhere
        y = np.zeros(1000, int)
        y[:5] = 1
        clf = GradientBoostingVoxelClassifier(n_estimators=0).fit(np.zeros((1000, 180)), y)
        case = preprocess([generate_phantom_case(small_cfg.phantom, 11, n_lesions=0)], small_cfg)[0]
        h = predict_heatmap(case, small_stage1.radiomics, clf, 4)
        assert h.values.max() < 0.3
        assert extract_rois(h, 0.3, 8) == []

    def test_heatmap_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            _hm(np.full((1, 2, 2), 1.5))
