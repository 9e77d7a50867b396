"""Volumes, cases, on-disk formats and intensity preprocessing."""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

MODALITIES = ("t2w", "adc", "dwi")

_DTYPES = {"f32le": np.dtype("<f4"), "u16le": np.dtype("<u2")}


class VolumeError(ValueError):
    """Raised when a volume, case or manifest violates its invariants."""


@dataclass(frozen=True, eq=False)
class Volume:
    """A 3-D scalar grid (z, y, x) with physical spacing in millimetres."""

    values: np.ndarray
    spacing_mm: Tuple[float, float, float]
    modality: str = "t2w"

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 3 or min(values.shape) < 1:
            raise VolumeError(f"volume must be a non-empty 3-D grid, got shape {values.shape}")
        spacing = tuple(float(s) for s in self.spacing_mm)
        if len(spacing) != 3 or not all(s > 0 for s in spacing):
            raise VolumeError(f"spacing must be three positive reals, got {self.spacing_mm}")
        if values.dtype.kind == "f" and not np.all(np.isfinite(values)):
            offset = int(np.flatnonzero(~np.isfinite(values.ravel()))[0])
            raise VolumeError(f"non-finite voxel at flat offset {offset}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "spacing_mm", spacing)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(self.values.shape)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.modality == other.modality
            and self.spacing_mm == other.spacing_mm
            and self.values.dtype == other.values.dtype
            and np.array_equal(self.values, other.values)
        )


@dataclass(frozen=True, eq=False)
class Case:
    """Three co-registered modality volumes plus optional label masks."""

    case_id: str
    volumes: Tuple[Volume, Volume, Volume]
    lesion_mask: Optional[np.ndarray] = None
    gland_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        vols = tuple(self.volumes)
        if len(vols) != 3:
            raise VolumeError(f"case {self.case_id}: expected 3 volumes, got {len(vols)}")
        dims, spacing = vols[0].dims, vols[0].spacing_mm
        for v in vols[1:]:
            if v.dims != dims:
                raise VolumeError(
                    f"case {self.case_id}: dims mismatch {v.modality} {v.dims} vs {dims}"
                )
            if not np.allclose(v.spacing_mm, spacing, rtol=1e-6, atol=0):
                raise VolumeError(f"case {self.case_id}: spacing mismatch for {v.modality}")
        object.__setattr__(self, "volumes", vols)
        if self.lesion_mask is not None:
            lesion = np.asarray(self.lesion_mask).astype(np.int32)
            if lesion.shape != dims:
                raise VolumeError(f"case {self.case_id}: lesion mask dims {lesion.shape} vs {dims}")
            ids = np.unique(lesion[lesion > 0])
            if lesion.min() < 0 or not np.array_equal(ids, np.arange(1, ids.size + 1)):
                raise VolumeError(f"case {self.case_id}: lesion ids must be contiguous from 1")
            lesion.setflags(write=False)
            object.__setattr__(self, "lesion_mask", lesion)
        if self.gland_mask is not None:
            gland = np.asarray(self.gland_mask) > 0
            if gland.shape != dims:
                raise VolumeError(f"case {self.case_id}: gland mask dims {gland.shape} vs {dims}")
            gland.setflags(write=False)
            object.__setattr__(self, "gland_mask", gland)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.volumes[0].dims

    @property
    def spacing_mm(self) -> Tuple[float, float, float]:
        return self.volumes[0].spacing_mm

    @property
    def n_lesions(self) -> int:
        if self.lesion_mask is None:
            return 0
        return int(self.lesion_mask.max(initial=0))

    @property
    def patient_label(self) -> Optional[int]:
        if self.lesion_mask is None:
            return None
        return int(self.n_lesions > 0)


@dataclass(frozen=True)
class PreprocessConfig:
    target_spacing_mm: Tuple[float, float, float] = (3.0, 0.25, 0.25)
    lo_percentile: float = 0.05
    hi_percentile: float = 99.5

    def __post_init__(self):
        if not 0 <= self.lo_percentile < self.hi_percentile <= 100:
            raise VolumeError("percentiles must satisfy 0 <= lo < hi <= 100")
        if len(self.target_spacing_mm) != 3 or min(self.target_spacing_mm) <= 0:
            raise VolumeError("target spacing must be three positive reals")


# --------------------------------------------------------------------------
# Resampling and normalization
# --------------------------------------------------------------------------


def _output_dims(dims, spacing, target):
    return tuple(max(1, int(round(n * s / t))) for n, s, t in zip(dims, spacing, target))


def _interp_axis(values: np.ndarray, coords: np.ndarray, axis: int) -> np.ndarray:
    n = values.shape[axis]
    coords = np.clip(coords, 0.0, n - 1)
    lo = np.floor(coords).astype(np.intp)
    hi = np.minimum(lo + 1, n - 1)
    frac = coords - lo
    shape = [1] * values.ndim
    shape[axis] = -1
    frac = frac.reshape(shape)
    a = np.take(values, lo, axis=axis)
    b = np.take(values, hi, axis=axis)
    return a * (1.0 - frac) + b * frac


def resample_trilinear(v: Volume, target_spacing_mm: Sequence[float]) -> Volume:
    """Resample onto a new grid sharing the physical origin of voxel (0, 0, 0).

    Output voxel ``i`` along an axis sits at physical position ``i * target``;
    points beyond the last source voxel clamp to it.
    """
    target = tuple(float(t) for t in target_spacing_mm)
    if len(target) != 3 or min(target) <= 0:
        raise VolumeError("target spacing must be three positive reals")
    out = np.asarray(v.values, dtype=np.float64)
    new_dims = _output_dims(v.dims, v.spacing_mm, target)
    for axis in range(3):
        coords = np.arange(new_dims[axis]) * (target[axis] / v.spacing_mm[axis])
        out = _interp_axis(out, coords, axis)
    return Volume(out, target, v.modality)


def resample_nearest(labels: np.ndarray, spacing_mm, target_spacing_mm) -> np.ndarray:
    """Nearest-neighbour resampling for categorical label grids."""
    labels = np.asarray(labels)
    new_dims = _output_dims(labels.shape, spacing_mm, target_spacing_mm)
    out = labels
    for axis in range(3):
        coords = np.arange(new_dims[axis]) * (target_spacing_mm[axis] / spacing_mm[axis])
        idx = np.clip(np.floor(coords + 0.5).astype(np.intp), 0, labels.shape[axis] - 1)
        out = np.take(out, idx, axis=axis)
    return out


def normalize_percentile(v: Volume, cfg: PreprocessConfig = PreprocessConfig()) -> Volume:
    values = np.asarray(v.values, dtype=np.float64)
    lo, hi = np.percentile(values, [cfg.lo_percentile, cfg.hi_percentile])
    if hi - lo < 1e-12:
        return Volume(np.zeros_like(values), v.spacing_mm, v.modality)
    out = np.clip((values - lo) / (hi - lo), 0.0, 1.0)
    return Volume(out, v.spacing_mm, v.modality)


def preprocess_case(case: Case, cfg: PreprocessConfig = PreprocessConfig()) -> Case:
    """Resample every grid to the target spacing and normalize intensities."""
    target = tuple(cfg.target_spacing_mm)
    same = np.allclose(case.spacing_mm, target, rtol=1e-9, atol=0)
    vols = []
    for v in case.volumes:
        if not same:
            v = resample_trilinear(v, target)
        vols.append(normalize_percentile(v, cfg))
    lesion, gland = case.lesion_mask, case.gland_mask
    if not same:
        if lesion is not None:
            lesion = _relabel(resample_nearest(lesion, case.spacing_mm, target))
        if gland is not None:
            gland = resample_nearest(gland, case.spacing_mm, target)
    return replace(case, volumes=tuple(vols), lesion_mask=lesion, gland_mask=gland)


def _relabel(labels: np.ndarray) -> np.ndarray:
    # nearest-neighbour downsampling can drop an instance; keep ids contiguous
    ids = np.unique(labels[labels > 0])
    lut = np.zeros(int(labels.max(initial=0)) + 1, dtype=np.int32)
    lut[ids] = np.arange(1, ids.size + 1)
    return lut[labels]


# --------------------------------------------------------------------------
# .mvol files and manifests
# --------------------------------------------------------------------------


def write_mvol(path, values: np.ndarray, spacing_mm, modality: str, dtype: str = "f32le") -> None:
    values = np.asarray(values)
    header = {
        "dims": [int(d) for d in values.shape],
        "spacing_mm": [float(s) for s in spacing_mm],
        "dtype": dtype,
        "modality": modality,
    }
    payload = np.ascontiguousarray(values, dtype=_DTYPES[dtype]).tobytes()
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(payload)


def read_mvol(path) -> Tuple[np.ndarray, dict]:
    path = Path(path)
    if not path.is_file():
        raise VolumeError(f"missing volume file: {path}")
    raw = path.read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise VolumeError(f"{path}: missing header terminator")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
        dims = tuple(int(d) for d in header["dims"])
        dtype = _DTYPES[header["dtype"]]
    except (ValueError, KeyError) as exc:
        raise VolumeError(f"{path}: malformed header ({exc})") from None
    expected = int(np.prod(dims)) * dtype.itemsize
    body = raw[nl + 1:]
    if len(body) != expected:
        raise VolumeError(f"{path}: expected {expected} payload bytes, found {len(body)}")
    values = np.frombuffer(body, dtype=dtype).reshape(dims)
    if dtype.kind == "f" and not np.all(np.isfinite(values)):
        offset = int(np.flatnonzero(~np.isfinite(values.ravel()))[0])
        raise VolumeError(f"{path}: non-finite voxel at flat offset {offset}")
    return values.copy(), header


def save_volume(path, v: Volume) -> None:
    write_mvol(path, v.values, v.spacing_mm, v.modality)


def load_volume(path) -> Volume:
    values, header = read_mvol(path)
    return Volume(values, tuple(header["spacing_mm"]), header.get("modality", ""))


def save_case(case: Case, directory) -> dict:
    """Write a case as .mvol files; return its manifest entry (paths relative to ``directory``'s parent)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entry = {"case_id": case.case_id}
    for name, v in zip(MODALITIES, case.volumes):
        save_volume(directory / f"{name}.mvol", v)
        entry[name] = f"{directory.name}/{name}.mvol"
    if case.lesion_mask is not None:
        write_mvol(directory / "lesion_mask.mvol", case.lesion_mask, case.spacing_mm, "lesion_mask", "u16le")
        entry["lesion_mask"] = f"{directory.name}/lesion_mask.mvol"
    if case.gland_mask is not None:
        write_mvol(directory / "gland_mask.mvol", case.gland_mask, case.spacing_mm, "gland_mask", "u16le")
        entry["gland_mask"] = f"{directory.name}/gland_mask.mvol"
    return entry


def load_case(entry: dict, root=".") -> Case:
    root = Path(root)
    missing = [k for k in ("case_id",) + MODALITIES if k not in entry]
    if missing:
        raise VolumeError(f"manifest entry lacks {missing}")
    vols = tuple(load_volume(root / entry[m]) for m in MODALITIES)
    lesion = gland = None
    if entry.get("lesion_mask"):
        lesion, _ = read_mvol(root / entry["lesion_mask"])
    if entry.get("gland_mask"):
        gland, _ = read_mvol(root / entry["gland_mask"])
    return Case(str(entry["case_id"]), vols, lesion, gland)


def read_manifest(path) -> list:
    path = Path(path)
    if not path.is_file():
        raise VolumeError(f"missing manifest: {path}")
    entries = json.loads(path.read_text())
    if not isinstance(entries, list):
        raise VolumeError(f"{path}: manifest must be a JSON array")
    return entries


def load_manifest(path) -> list:
    path = Path(path)
    return [load_case(e, path.parent) for e in read_manifest(path)]


def write_manifest(path, entries) -> None:
    Path(path).write_text(json.dumps(list(entries), indent=1) + "\n")
