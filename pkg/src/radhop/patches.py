"""Stage-2 inputs: a 13x13 grid of compact radiomics over a 72x72 region per ROI."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

from .net import map_residue
from .volume import MODALITIES, Case

REGION = 72
CONTEXT = 96
WINDOW = 24
STRIDE = 4
GRID = (REGION - WINDOW) // STRIDE + 1  # 13


@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    max_shift: int = 5
    max_rotation_deg: float = 10.0


@dataclass(frozen=True, eq=False)
class RoiPatchTensor:
    """``grid`` is (13, 13, 3*C), channel order ``[T2W C | ADC C | DWI C]``."""

    grid: np.ndarray
    roi_ref: Tuple[str, int]
    target: Optional[float] = None
    p_roi: Optional[float] = None
    y_roi: Optional[int] = None
    augmentation_tag: str = "identity"


def _context(values2d, center, size):
    """``size`` x ``size`` crop centred at ``center`` (rows cy - size/2 .. cy + size/2 - 1), edge-replicated."""
    half = size // 2
    padded = np.pad(np.asarray(values2d, dtype=np.float64), half, mode="edge")
    cy, cx = center
    return padded[cy:cy + size, cx:cx + size]


def region_features(regions, models):
    """Compact features on the 13x13 window grid of three 72x72 regions."""
    offs = np.arange(GRID) * STRIDE
    top_left = np.stack(np.meshgrid(offs, offs, indexing="ij"), axis=-1).reshape(-1, 2)
    parts = []
    for region, name in zip(regions, MODALITIES):
        m = models[name]
        raw = m.radhop.transform_image(region, top_left)
        parts.append(m.compact(raw).reshape(GRID, GRID, -1))
    return np.concatenate(parts, axis=-1)


def _target(roi, delta):
    if roi.residue is None:
        return None
    return float(map_residue(roi.residue, delta))


def extract_roi_patch(case: Case, roi, models, delta=1e-4) -> RoiPatchTensor:
    """Features for the 72x72 region on the peak slice centred at the ROI centroid.

    Grid cell (i, j) is the window centred at region pixel (4i + 12, 4j + 12).
    """
    z = roi.peak[0]
    regions = [_context(case.volumes[m].values[z], roi.centroid_inplane, REGION) for m in range(3)]
    return RoiPatchTensor(region_features(regions, models), (case.case_id, roi.roi_id),
                          _target(roi, delta), roi.p_roi, roi.y_roi)


def _transform_context(ctx, hflip, vflip, theta_deg):
    if hflip:
        ctx = ctx[:, ::-1]
    if vflip:
        ctx = ctx[::-1, :]
    if theta_deg != 0.0:
        t = np.deg2rad(theta_deg)
        rot = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
        c = (np.array(ctx.shape) - 1) / 2.0
        ctx = ndimage.affine_transform(ctx, rot, offset=c - rot @ c, order=1, mode="nearest")
    return np.ascontiguousarray(ctx)


def augmented_patch(case: Case, roi, models, hflip=False, vflip=False, shift=(0, 0),
                    theta_deg=0.0, delta=1e-4) -> RoiPatchTensor:
    """Patch after an explicit image-space transform of the 96x96 context window.

    Flips and the rotation (about the context centre) are applied first; the
    72x72 crop is then taken ``shift`` voxels away from the centre.
    """
    dy, dx = int(shift[0]), int(shift[1])
    margin = (CONTEXT - REGION) // 2
    if max(abs(dy), abs(dx)) > margin:
        raise ValueError(f"shift must stay within {margin} voxels")
    z = roi.peak[0]
    regions = []
    for m in range(3):
        ctx = _context(case.volumes[m].values[z], roi.centroid_inplane, CONTEXT)
        ctx = _transform_context(ctx, hflip, vflip, theta_deg)
        regions.append(ctx[margin + dy:margin + dy + REGION, margin + dx:margin + dx + REGION])
    tag = f"hflip={int(hflip)},vflip={int(vflip)},shift={dy},{dx},rot={theta_deg:.4f}"
    return RoiPatchTensor(region_features(regions, models), (case.case_id, roi.roi_id),
                          _target(roi, delta), roi.p_roi, roi.y_roi, tag)


def augment_roi_patch(case: Case, roi, models, rng, cfg: AugmentConfig = AugmentConfig(),
                      delta=1e-4) -> RoiPatchTensor:
    hflip = bool(rng.random() < cfg.flip_prob)
    vflip = bool(rng.random() < cfg.flip_prob)
    shift = tuple(int(s) for s in rng.integers(-cfg.max_shift, cfg.max_shift + 1, size=2))
    theta = float(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg))
    return augmented_patch(case, roi, models, hflip, vflip, shift, theta, delta)


def stack_patches(patches):
    X = np.stack([p.grid for p in patches]) if patches else np.zeros((0, GRID, GRID, 60))
    return X


def save_patch_cache(path, patches) -> None:
    """f32 blob of stacked grids plus a JSON index (``path`` and ``path.bin``)."""
    path = Path(path)
    sidecar = path.with_name(path.name + ".bin")
    sidecar.write_bytes(np.ascontiguousarray(stack_patches(patches), dtype="<f4").tobytes())
    index = [{"roi_ref": list(p.roi_ref), "target": p.target, "p_roi": p.p_roi, "y_roi": p.y_roi,
              "augmentation_tag": p.augmentation_tag} for p in patches]
    shape = list(patches[0].grid.shape) if patches else [GRID, GRID, 60]
    path.write_text(json.dumps({"grid_shape": shape, "blob": sidecar.name, "patches": index}) + "\n")


def load_patch_cache(path):
    path = Path(path)
    desc = json.loads(path.read_text())
    shape = desc["grid_shape"]
    raw = np.frombuffer((path.parent / desc["blob"]).read_bytes(), "<f4").astype(np.float64)
    grids = raw.reshape([-1] + shape)
    return [RoiPatchTensor(g, tuple(e["roi_ref"]), e["target"], e["p_roi"], e["y_roi"],
                           e["augmentation_tag"]) for g, e in zip(grids, desc["patches"])]
