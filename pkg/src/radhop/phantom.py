"""Synthetic tri-modal cases with planted lesions and context-dependent distractors.

Lesions are small ellipsoids.  Distractors are thin curved bands carrying
the same tri-modal contrast: inside a 24x24 window they look like a lesion
edge, but over a 72x72 region their elongated shape gives them away.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple

import numpy as np
from scipy.ndimage import convolve1d

from .volume import MODALITIES, Case, Volume, save_case, write_manifest

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PhantomConfig:
    dims: Tuple[int, int, int] = (16, 96, 96)
    spacing_mm: Tuple[float, float, float] = (3.0, 0.25, 0.25)
    lesions_mean: float = 1.2
    lesions_cap: int = 3
    distractors_mean: float = 2.0
    distractors_cap: int = 4
    lesion_radius: Tuple[float, float] = (3.0, 7.0)
    lesion_z_radius: Tuple[float, float] = (0.8, 1.6)
    band_width: Tuple[int, int] = (2, 3)
    band_length: Tuple[float, float] = (40.0, 64.0)
    band_radius: Tuple[float, float] = (14.0, 26.0)
    band_slices: Tuple[int, int] = (1, 2)
    # T2W-like, ADC-like, DWI-like
    contrast: Tuple[float, float, float] = (-0.15, -0.35, 0.35)
    background: Tuple[float, float, float] = (0.30, 0.40, 0.20)
    gland: Tuple[float, float, float] = (0.60, 0.70, 0.35)
    gland_semi_axes: Tuple[float, float, float] = (0.40, 0.36, 0.40)
    noise_sigma: float = 0.08
    max_attempts: int = 100


_SMOOTH = np.array([0.25, 0.5, 0.25])


def _smoothed_noise(rng, dims, sigma):
    """Correlated noise whose marginal standard deviation is ``sigma`` (away from edges)."""
    noise = rng.normal(0.0, 1.0, size=dims)
    for axis in range(3):
        noise = convolve1d(noise, _SMOOTH, axis=axis, mode="nearest")
    gain = np.sqrt(np.sum(_SMOOTH ** 2)) ** 3
    return noise * (sigma / gain)


def _grid(dims):
    return np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij")


def _gland_mask(cfg, zz, yy, xx):
    c = [(n - 1) / 2 for n in cfg.dims]
    a = [f * n for f, n in zip(cfg.gland_semi_axes, cfg.dims)]
    return ((zz - c[0]) / a[0]) ** 2 + ((yy - c[1]) / a[1]) ** 2 + ((xx - c[2]) / a[2]) ** 2 <= 1.0


def _lesion_shape(cfg, rng, gland_idx, zz, yy, xx):
    center = gland_idx[rng.integers(len(gland_idx))] + rng.uniform(-0.5, 0.5, size=3)
    r = rng.uniform(*cfg.lesion_radius)
    ry, rx = r * rng.uniform(0.85, 1.15), r * rng.uniform(0.85, 1.15)
    rz = rng.uniform(*cfg.lesion_z_radius)
    return (((zz - center[0]) / rz) ** 2 + ((yy - center[1]) / ry) ** 2
            + ((xx - center[2]) / rx) ** 2) <= 1.0


def _band_shape(cfg, rng, gland_idx, zz, yy, xx):
    z0, y0, x0 = gland_idx[rng.integers(len(gland_idx))]
    radius = rng.uniform(*cfg.band_radius)
    length = rng.uniform(*cfg.band_length)
    width = int(rng.integers(cfg.band_width[0], cfg.band_width[1] + 1))
    phi = rng.uniform(0, 2 * np.pi)
    # circle centre chosen so that (y0, x0) is the arc midpoint
    cy, cx = y0 - radius * np.sin(phi), x0 - radius * np.cos(phi)
    half_angle = 0.5 * length / radius
    dist = np.hypot(yy - cy, xx - cx)
    ang = np.angle(np.exp(1j * (np.arctan2(yy - cy, xx - cx) - phi)))
    n_slices = int(rng.integers(cfg.band_slices[0], cfg.band_slices[1] + 1))
    zs = np.abs(zz - z0) < n_slices - 0.5
    return zs & (np.abs(dist - radius) <= width / 2) & (np.abs(ang) <= half_angle)


def generate_phantom_case(cfg: PhantomConfig = PhantomConfig(), case_seed: int = 0,
                          case_id: str = None, n_lesions: int = None) -> Case:
    """Deterministic phantom case; ``n_lesions`` overrides the Poisson draw."""
    rng = np.random.default_rng(case_seed)
    dims = tuple(cfg.dims)
    zz, yy, xx = _grid(dims)
    gland = _gland_mask(cfg, zz, yy, xx)
    gland_idx = np.argwhere(gland)
    if n_lesions is None:
        n_lesions = min(int(rng.poisson(cfg.lesions_mean)), cfg.lesions_cap)
    n_distract = min(int(rng.poisson(cfg.distractors_mean)), cfg.distractors_cap)

    occupied = np.zeros(dims, dtype=bool)
    lesion_mask = np.zeros(dims, dtype=np.int32)
    structures = np.zeros(dims, dtype=bool)
    plan = [("lesion", _lesion_shape)] * n_lesions + [("distractor", _band_shape)] * n_distract
    for kind, make in plan:
        for _ in range(cfg.max_attempts):
            shape = make(cfg, rng, gland_idx, zz, yy, xx)
            if shape.sum() >= 8 and not (shape & ~gland).any() and not (shape & occupied).any():
                break
        else:
            logger.info("phantom %s: dropped a %s after %d attempts", case_id, kind, cfg.max_attempts)
            continue
        occupied |= _dilate(shape, 3)
        structures |= shape
        if kind == "lesion":
            lesion_mask[shape] = lesion_mask.max() + 1

    vols = []
    for m, name in enumerate(MODALITIES):
        base = np.where(gland, cfg.gland[m], cfg.background[m])
        base = base + np.where(structures, cfg.contrast[m], 0.0)
        base = base + _smoothed_noise(rng, dims, cfg.noise_sigma)
        vols.append(Volume(base.astype(np.float32), cfg.spacing_mm, name))
    if case_id is None:
        case_id = f"case{case_seed:05d}"
    return Case(case_id, tuple(vols), lesion_mask, gland)


def _dilate(mask, r):
    # in-plane square dilation by r voxels, plus one slice through-plane
    out = mask.copy()
    for axis, rad in ((0, 1), (1, r), (2, r)):
        acc = out.copy()
        for s in range(1, rad + 1):
            acc[tuple(slice(s, None) if a == axis else slice(None) for a in range(3))] |= \
                out[tuple(slice(None, -s) if a == axis else slice(None) for a in range(3))]
            acc[tuple(slice(None, -s) if a == axis else slice(None) for a in range(3))] |= \
                out[tuple(slice(s, None) if a == axis else slice(None) for a in range(3))]
        out = acc
    return out


def split_counts(n_cases, split):
    if n_cases < 3:
        raise ValueError("need at least 3 cases")
    split = tuple(float(f) for f in split)
    if len(split) != 3 or min(split) < 0 or abs(sum(split) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be three non-negative reals summing to 1, got {split}")
    n_train = int(round(split[0] * n_cases))
    n_val = int(round(split[1] * n_cases))
    return n_train, n_val, n_cases - n_train - n_val


def generate_dataset(cfg: PhantomConfig, n_cases: int, split=(0.6, 0.2, 0.2),
                     master_seed: int = 0, out_dir=None):
    """Generate ``n_cases`` phantoms (case ``i`` seeded ``master_seed + i``).

    Returns ``{"train": [...], "val": [...], "test": [...]}`` manifest entries; when
    ``out_dir`` is given, cases and ``{split}.json`` manifests are written there.
    """
    counts = split_counts(n_cases, split)
    manifests, i = {}, 0
    for name, count in zip(("train", "val", "test"), counts):
        entries = []
        for _ in range(count):
            case = generate_phantom_case(cfg, master_seed + i, case_id=f"case{i:04d}")
            if out_dir is not None:
                entries.append(save_case(case, Path(out_dir) / case.case_id))
            else:
                entries.append(case)
            i += 1
        manifests[name] = entries
    if out_dir is not None:
        for name, entries in manifests.items():
            write_manifest(Path(out_dir) / f"{name}.json", entries)
    return manifests
