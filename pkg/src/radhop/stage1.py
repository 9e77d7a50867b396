"""Stage 1: voxel features, heatmap prediction and candidate ROI extraction."""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .radiomics import ModalityRadiomics, RadHop
from .volume import MODALITIES, Case

HALF_WINDOW = 12


@dataclass(frozen=True, eq=False)
class Heatmap:
    values: np.ndarray
    stride: int
    case_id: str

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or v.min(initial=0) < 0 or v.max(initial=0) > 1:
            raise ValueError("heatmap must be a 3-D grid with values in [0, 1]")


@dataclass
class RoiRecord:
    """One candidate lesion.  ``residue`` is Y - P; ``eps_hat`` is the Stage-2 correction."""

    roi_id: int
    voxels: np.ndarray = field(repr=False)
    peak: Tuple[int, int, int]
    p_roi: float
    centroid_inplane: Tuple[int, int]
    y_roi: Optional[int] = None
    residue: Optional[float] = None
    eps_hat: Optional[float] = None
    final_prob: Optional[float] = None

    @property
    def score(self) -> float:
        """Final probability when corrected, else the Stage-1 probability."""
        return self.p_roi if self.final_prob is None else self.final_prob

    def to_dict(self, with_voxels=True):
        d = {
            "roi_id": self.roi_id, "peak": list(self.peak), "p_roi": self.p_roi,
            "centroid_inplane": list(self.centroid_inplane), "y_roi": self.y_roi,
            "residue": self.residue, "eps_hat": self.eps_hat, "final_prob": self.final_prob,
            "n_voxels": int(len(self.voxels)),
        }
        if with_voxels:
            d["voxels"] = np.asarray(self.voxels).tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(
            roi_id=int(d["roi_id"]),
            voxels=np.asarray(d.get("voxels", [d["peak"]]), dtype=np.intp).reshape(-1, 3),
            peak=tuple(int(v) for v in d["peak"]), p_roi=float(d["p_roi"]),
            centroid_inplane=tuple(int(v) for v in d["centroid_inplane"]),
            y_roi=d.get("y_roi"), residue=d.get("residue"),
            eps_hat=d.get("eps_hat"), final_prob=d.get("final_prob"),
        )


# --------------------------------------------------------------------------
# Features
# --------------------------------------------------------------------------


def padded_slice(volume_values, z, pad=HALF_WINDOW):
    return np.pad(np.asarray(volume_values[z], dtype=np.float64), pad, mode="edge")


def slice_raw_features(radhop: RadHop, image2d, points_yx):
    """Raw RadHop features of the windows centred at ``points_yx`` (edge-replicated borders)."""
    padded = np.pad(np.asarray(image2d, dtype=np.float64), HALF_WINDOW, mode="edge")
    # window centred at (y, x) has its top-left at (y, x) in the padded frame
    return radhop.transform_image(padded, points_yx)


def case_raw_features(case: Case, radhop: RadHop, modality: int, points_zyx):
    """Raw features for one modality at arbitrary voxels, computed slice by slice."""
    points_zyx = np.asarray(points_zyx, dtype=np.intp).reshape(-1, 3)
    out = np.empty((len(points_zyx), radhop.n_features_out_), dtype=np.float32)
    values = case.volumes[modality].values
    for z in np.unique(points_zyx[:, 0]):
        rows = np.flatnonzero(points_zyx[:, 0] == z)
        out[rows] = slice_raw_features(radhop, values[z], points_zyx[rows, 1:])
    return out


def slice_selected_features(case: Case, models: Dict[str, ModalityRadiomics], z, points_yx):
    """Concatenated selected features ``[T2W | ADC | DWI]`` for one slice."""
    parts = []
    for m, name in enumerate(MODALITIES):
        raw = slice_raw_features(models[name].radhop, case.volumes[m].values[z], points_yx)
        parts.append(models[name].selected(raw))
    return np.concatenate(parts, axis=1)


def sample_voxels(case: Case, n_pos=500, n_neg=1500, rng=None):
    """Lesion-voxel and background-voxel coordinates (inside the gland when present)."""
    rng = np.random.default_rng(rng)
    if case.lesion_mask is None:
        raise ValueError(f"case {case.case_id} has no lesion mask")
    region = case.gland_mask if case.gland_mask is not None else np.ones(case.dims, bool)
    pos = np.argwhere((case.lesion_mask > 0) & region)
    neg = np.argwhere((case.lesion_mask == 0) & region)
    pos = pos[np.sort(rng.choice(len(pos), size=min(n_pos, len(pos)), replace=False))]
    neg = neg[np.sort(rng.choice(len(neg), size=min(n_neg, len(neg)), replace=False))]
    points = np.vstack([pos, neg])
    labels = np.concatenate([np.ones(len(pos), np.int8), np.zeros(len(neg), np.int8)])
    return points, labels


def sample_windows(cases: Sequence[Case], modality: int, per_case=64, seed=0, window=24):
    """Windows centred at random gland voxels, for fitting the Saab cascade."""
    rng = np.random.default_rng(seed)
    half = window // 2
    out = []
    for case in cases:
        region = case.gland_mask if case.gland_mask is not None else np.ones(case.dims, bool)
        idx = np.argwhere(region)
        picks = idx[np.sort(rng.choice(len(idx), size=min(per_case, len(idx)), replace=False))]
        values = case.volumes[modality].values
        for z, y, x in picks:
            padded = np.pad(np.asarray(values[z], dtype=np.float64), half, mode="edge")
            out.append(padded[y:y + window, x:x + window])
    return np.stack(out)


def build_voxel_dataset(cases, models, n_pos=500, n_neg=1500, seed=0):
    """Balanced voxel samples with features ``[T2W 800 | ADC 800 | DWI 800]``."""
    rng = np.random.default_rng(seed)
    feats, labels = [], []
    for case in cases:
        points, y = sample_voxels(case, n_pos, n_neg, rng)
        parts = [models[name].selected(case_raw_features(case, models[name].radhop, m, points))
                 for m, name in enumerate(MODALITIES)]
        feats.append(np.concatenate(parts, axis=1))
        labels.append(y)
    return np.vstack(feats), np.concatenate(labels)


# --------------------------------------------------------------------------
# Heatmaps
# --------------------------------------------------------------------------


def _upsample(grid, stride, shape):
    out = grid
    for axis, n in enumerate(shape):
        coords = np.clip(np.arange(n) / stride, 0, grid.shape[axis] - 1)
        lo = np.floor(coords).astype(np.intp)
        hi = np.minimum(lo + 1, grid.shape[axis] - 1)
        frac = (coords - lo).reshape((-1, 1) if axis == 0 else (1, -1))
        a, b = np.take(out, lo, axis=axis), np.take(out, hi, axis=axis)
        out = a * (1.0 - frac) + b * frac
    return out


def predict_slice(case, models, clf, z, stride=4):
    ny, nx = case.dims[1:]
    ys, xs = np.arange(0, ny, stride), np.arange(0, nx, stride)
    grid = np.zeros((len(ys), len(xs)))
    if case.gland_mask is not None:
        mask = case.gland_mask[z]
        if not mask.any():
            return np.zeros((ny, nx))
        near = ndimage.binary_dilation(mask, np.ones((2 * stride - 1, 2 * stride - 1), bool))
        active = near[np.ix_(ys, xs)]
    else:
        mask, active = None, np.ones_like(grid, bool)
    gy, gx = np.nonzero(active)
    if gy.size:
        feats = slice_selected_features(case, models, z, np.column_stack([ys[gy], xs[gx]]))
        grid[gy, gx] = clf.predict_proba(feats)[:, 1]
    full = np.clip(_upsample(grid, stride, (ny, nx)), 0.0, 1.0)
    if mask is not None:
        full[~mask] = 0.0
    return full


def predict_heatmap(case: Case, models, clf, stride=4, threads=1) -> Heatmap:
    """Per-slice probability map; slices are independent and merged in index order."""
    nz = case.dims[0]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            slices = list(pool.map(lambda z: predict_slice(case, models, clf, z, stride), range(nz)))
    else:
        slices = [predict_slice(case, models, clf, z, stride) for z in range(nz)]
    return Heatmap(np.stack(slices), stride, case.case_id)


# --------------------------------------------------------------------------
# ROIs
# --------------------------------------------------------------------------

_CONNECTIVITY_26 = np.ones((3, 3, 3), dtype=bool)


def extract_rois(h: Heatmap, threshold=0.3, min_voxels=8) -> List[RoiRecord]:
    values = np.asarray(h.values)
    labels, n = ndimage.label(values >= threshold, structure=_CONNECTIVITY_26)
    rois = []
    for k in range(1, n + 1):
        voxels = np.argwhere(labels == k)
        if len(voxels) < min_voxels:
            continue
        probs = values[tuple(voxels.T)]
        p_max = float(probs.max())
        peak = tuple(int(v) for v in voxels[np.flatnonzero(probs == p_max)[0]])
        on_slice = voxels[voxels[:, 0] == peak[0], 1:]
        centroid = tuple(int(v) for v in np.floor(on_slice.mean(axis=0) + 0.5))
        rois.append(RoiRecord(len(rois) + 1, voxels, peak, p_max, centroid))
    return rois


def label_rois(rois, lesion_mask) -> List[RoiRecord]:
    """Attach ``Y_roi`` (peak inside any lesion) and the residue ``Y_roi - P_roi``."""
    lesion_mask = np.asarray(lesion_mask)
    out = []
    for roi in rois:
        if any(p >= s or p < 0 for p, s in zip(roi.peak, lesion_mask.shape)):
            raise ValueError("lesion mask is not aligned with the ROI grid")
        y = int(lesion_mask[roi.peak] > 0)
        out.append(replace(roi, y_roi=y, residue=float(y - roi.p_roi)))
    return out


def rois_to_json(rois, with_voxels=True) -> str:
    return json.dumps([r.to_dict(with_voxels) for r in rois])


def rois_from_json(text) -> List[RoiRecord]:
    return [RoiRecord.from_dict(d) for d in json.loads(text)]
