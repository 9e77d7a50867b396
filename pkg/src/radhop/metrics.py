"""Lesion-level AP, patient-level AUROC and report emission."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

TP, FP, DISCARDED = "tp", "fp", "discarded"


@dataclass(frozen=True)
class LesionMatch:
    case_id: str
    roi_id: int
    final_prob: float
    status: str  # tp | fp | discarded
    lesion_id: Optional[int] = None

    @property
    def is_tp(self) -> bool:
        return self.status == TP


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC; tied positive/negative pairs earn half credit."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both positive and negative labels")
    ranks = rankdata(scores)  # average ranks give the half credit for ties
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(scores, labels):
    """(fpr, tpr, threshold) points, one per distinct score, highest first."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tps = np.cumsum(y)[last]
    fps = (last + 1) - tps
    n_pos, n_neg = max(labels.sum(), 1), max((~labels).sum(), 1)
    pts = [(0.0, 0.0, float("inf"))]
    pts += [(float(f / n_neg), float(t / n_pos), float(s[i])) for f, t, i in zip(fps, tps, last)]
    return pts


def match_lesions(rois, lesion_mask, case_id="") -> List[LesionMatch]:
    """Greedy peak-in-lesion matching in descending score order (ties: lower ROI id first).

    A hit consumes its lesion; later ROIs hitting the same lesion are
    discarded.  ROIs whose peak lies in background are false positives.
    """
    lesion_mask = np.asarray(lesion_mask)
    for roi in rois:
        if len(roi.peak) != lesion_mask.ndim or any(
                p < 0 or p >= s for p, s in zip(roi.peak, lesion_mask.shape)):
            raise ValueError(f"lesion mask {lesion_mask.shape} is not aligned with ROI peak {roi.peak}")
    used, out = set(), []
    for roi in sorted(rois, key=lambda r: (-r.score, r.roi_id)):
        lid = int(lesion_mask[tuple(roi.peak)])
        if lid == 0:
            out.append(LesionMatch(case_id, roi.roi_id, float(roi.score), FP))
        elif lid in used:
            out.append(LesionMatch(case_id, roi.roi_id, float(roi.score), DISCARDED, lid))
        else:
            used.add(lid)
            out.append(LesionMatch(case_id, roi.roi_id, float(roi.score), TP, lid))
    return out


def average_precision(matches: Sequence[LesionMatch], total_lesions: int):
    """Step-interpolated AP over retained ROIs; returns ``(ap, pr_points)``.

    ``pr_points`` holds ``(recall, precision, threshold)`` after each retained
    ROI, ranked by score (ties keep the input order).
    """
    if total_lesions < 1:
        raise ValueError("average precision needs at least one lesion")
    kept = [m for m in matches if m.status != DISCARDED]
    order = sorted(range(len(kept)), key=lambda i: -kept[i].final_prob)
    ap, tp, points = 0.0, 0, []
    for k, i in enumerate(order, start=1):
        if kept[i].is_tp:
            tp += 1
        precision, recall = tp / k, tp / total_lesions
        if kept[i].is_tp:
            # each retained TP is a distinct lesion, so recall steps by exactly 1 / total
            ap += precision / total_lesions
        points.append((recall, precision, kept[i].final_prob))
    return float(ap), points


def patient_score(rois) -> float:
    """Maximum corrected ROI probability; 0 when nothing was detected."""
    return float(max((r.score for r in rois), default=0.0))


@dataclass
class EvalReport:
    auroc: Optional[float]
    ap: float
    pr_points: List[Tuple[float, float, float]] = field(default_factory=list)
    roc_points: List[Tuple[float, float, float]] = field(default_factory=list)
    patient_scores: List[dict] = field(default_factory=list)
    lesion_matches: List[dict] = field(default_factory=list)
    total_lesions: int = 0

    def to_dict(self):
        return asdict(self)


def evaluate_cases(cases_rois, lesion_masks, case_ids, labels=None) -> EvalReport:
    """Score a cohort.  ``cases_rois[i]`` are the ROIs of case ``case_ids[i]``.

    Matching runs per case; AP pools every retained ROI in case-id order.
    Patient labels default to "mask has any lesion".
    """
    order = sorted(range(len(case_ids)), key=lambda i: case_ids[i])
    matches, total, pscores = [], 0, []
    for i in order:
        mask = np.asarray(lesion_masks[i])
        n_les = int(np.unique(mask[mask > 0]).size)
        total += n_les
        matches += match_lesions(cases_rois[i], mask, case_ids[i])
        label = int(n_les > 0) if labels is None else int(labels[i])
        pscores.append({"case_id": case_ids[i], "score": patient_score(cases_rois[i]), "label": label})
    ap, pr = average_precision(matches, total) if total > 0 else (0.0, [])
    s = [p["score"] for p in pscores]
    y = [p["label"] for p in pscores]
    has_both = 0 < sum(y) < len(y)
    return EvalReport(
        auroc=auroc(s, y) if has_both else None, ap=ap, pr_points=pr,
        roc_points=roc_curve(s, y) if has_both else [], patient_scores=pscores,
        lesion_matches=[asdict(m) for m in matches], total_lesions=total,
    )


def write_report(report_dir, reports: dict) -> None:
    """``reports`` maps a variant name (e.g. ``stage1``) to its :class:`EvalReport`."""
    report_dir = Path(report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)
    payload = {name: r.to_dict() for name, r in reports.items()}
    (report_dir / "report.json").write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    for name, r in reports.items():
        _write_csv(report_dir / f"{name}_pr.csv", ["recall", "precision", "threshold"], r.pr_points)
        _write_csv(report_dir / f"{name}_roc.csv", ["fpr", "tpr", "threshold"], r.roc_points)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows([[repr(float(v)) for v in row] for row in rows])


# --------------------------------------------------------------------------
# Overlays
# --------------------------------------------------------------------------


def write_ppm(path, rgb) -> None:
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(rgb.tobytes())


def overlay_slice(image2d, roi_masks_tp, roi_masks_fp):
    """Grayscale slice with detection outlines: TPs in green, FPs in red."""
    img = np.asarray(image2d, dtype=np.float64)
    lo, hi = img.min(), img.max()
    gray = np.zeros_like(img) if hi - lo < 1e-12 else (img - lo) / (hi - lo)
    rgb = np.repeat((gray * 255).round().astype(np.uint8)[..., None], 3, axis=2)
    for masks, colour in ((roi_masks_fp, (255, 0, 0)), (roi_masks_tp, (0, 255, 0))):
        for m in masks:
            edge = m & ~ndimage.binary_erosion(m)
            rgb[edge] = colour
    return rgb


def write_overlays(out_dir, case, rois, matches) -> List[Path]:
    """One PPM per slice that carries at least one detection."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    status = {m.roi_id: m.status for m in matches}
    written = []
    for z in range(case.dims[0]):
        tp, fp = [], []
        for roi in rois:
            vox = roi.voxels[roi.voxels[:, 0] == z]
            if len(vox) == 0:
                continue
            m = np.zeros(case.dims[1:], bool)
            m[vox[:, 1], vox[:, 2]] = True
            (tp if status.get(roi.roi_id) == TP else fp).append(m)
        if tp or fp:
            path = out_dir / f"{case.case_id}_z{z:03d}.ppm"
            write_ppm(path, overlay_slice(case.volumes[0].values[z], tp, fp))
            written.append(path)
    return written
