"""End-to-end orchestration: Stage-1 fitting, ROI datasets, Stage-2 training, inference, scoring.

Every fitted model is written to ``model_dir`` and read back before it is
used downstream, so an in-process run and a run split across CLI commands
see exactly the same (f32-serialized) parameters.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np

from .classifier import load_classifier, make_voxel_classifier, save_classifier
from .config import PipelineConfig
from .metrics import EvalReport, evaluate_cases, match_lesions, write_overlays
from .net import RadHopNet, load_net, save_net
from .patches import augment_roi_patch, extract_roi_patch
from .radiomics import (DFTSelector, LNT, ModalityRadiomics, RadHop, load_radiomics,
                        save_radiomics)
from .stage1 import (case_raw_features, extract_rois, label_rois, predict_heatmap,
                     sample_voxels, sample_windows)
from .stage2 import correct_rois, train_stage2, write_log
from .volume import MODALITIES, Case, preprocess_case

logger = logging.getLogger(__name__)

RADIOMICS_FILE = "radiomics.json"
CLASSIFIER_FILE = "classifier.json"
NET_FILE = "radhopnet.json"
LOG_FILE = "train_log.csv"

# offsets keep the random streams of different pipeline steps apart
_SEED_WINDOWS, _SEED_VOXELS, _SEED_AUGMENT = 0, 1, 2


class PipelineError(RuntimeError):
    """Degenerate pipeline state (for example, no ROIs to train on)."""


@dataclass
class Stage1Models:
    radiomics: Dict[str, ModalityRadiomics]
    classifier: object


def preprocess(cases: Sequence[Case], cfg: PipelineConfig) -> List[Case]:
    return [preprocess_case(c, cfg.preprocess) for c in cases]


# --------------------------------------------------------------------------
# Stage 1
# --------------------------------------------------------------------------


def _make_classifier(cfg: PipelineConfig):
    s = cfg.stage1
    if s.classifier == "gbdt":
        return make_voxel_classifier(
            "gbdt", n_estimators=s.n_estimators, max_depth=s.max_depth,
            learning_rate=s.learning_rate, subsample=s.subsample,
            min_samples_leaf=s.min_samples_leaf, max_bins=s.max_bins,
            reg_lambda=s.reg_lambda, random_state=cfg.seed)
    return make_voxel_classifier(s.classifier, alpha=s.logistic_alpha, tol=s.logistic_tol)


def fit_stage1(cases: Sequence[Case], cfg: PipelineConfig, model_dir) -> Stage1Models:
    """Fit RadHop, DFT selection, LNT and the voxel classifier on preprocessed cases.

    Raises :class:`~radhop.radiomics.FeatureBudgetError` when a modality yields
    fewer than ``min_features`` raw features.
    """
    rc = cfg.radiomics
    model_dir = Path(model_dir)
    model_dir.mkdir(parents=True, exist_ok=True)
    path = model_dir / RADIOMICS_FILE

    hops = {}
    for m, name in enumerate(MODALITIES):
        windows = sample_windows(cases, m, rc.windows_per_case, cfg.seed + _SEED_WINDOWS, rc.window)
        hops[name] = ModalityRadiomics(RadHop(rc.window, rc.block, rc.energy_threshold,
                                              rc.max_channels, rc.min_features).fit(windows))
        logger.info("%s: %d raw features", name, hops[name].radhop.n_features_out_)
    save_radiomics(path, hops, cfg.seed)
    hops = load_radiomics(path)

    rng = np.random.default_rng(cfg.seed + _SEED_VOXELS)
    samples = [sample_voxels(c, cfg.stage1.n_pos, cfg.stage1.n_neg, rng) for c in cases]
    y = np.concatenate([s[1] for s in samples])
    models, blocks = {}, []
    for m, name in enumerate(MODALITIES):
        rh = hops[name].radhop
        raw = np.vstack([case_raw_features(c, rh, m, s[0]) for c, s in zip(cases, samples)])
        sel = DFTSelector(rc.k, rc.dft_bins).fit(raw, y)
        blocks.append(sel.transform(raw))
        del raw
        lnt = LNT(rc.lnt_n_out, rc.lnt_subset, rc.lnt_ridge, rc.lnt_seed + cfg.seed)
        models[name] = ModalityRadiomics(rh, sel, lnt.fit(blocks[-1].astype(np.float64), y))
    save_radiomics(path, models, cfg.seed)
    models = load_radiomics(path)

    # the reloaded RadHop arrays are the ones used above, so these columns are exact
    X = np.hstack(blocks)
    del blocks
    clf = _make_classifier(cfg).fit(X, y)
    save_classifier(model_dir / CLASSIFIER_FILE, clf)
    return Stage1Models(models, load_classifier(model_dir / CLASSIFIER_FILE))


def load_stage1(model_dir) -> Stage1Models:
    model_dir = Path(model_dir)
    return Stage1Models(load_radiomics(model_dir / RADIOMICS_FILE),
                        load_classifier(model_dir / CLASSIFIER_FILE))


def detect(case: Case, s1: Stage1Models, cfg: PipelineConfig, threads=None):
    """Stage-1 heatmap and ROIs of one preprocessed case (labeled when a mask is present)."""
    h = predict_heatmap(case, s1.radiomics, s1.classifier, cfg.stage1.stride,
                        threads or cfg.threads)
    rois = extract_rois(h, cfg.stage1.threshold, cfg.stage1.min_voxels)
    if case.lesion_mask is not None:
        rois = label_rois(rois, case.lesion_mask)
    return h, rois


# --------------------------------------------------------------------------
# Stage 2
# --------------------------------------------------------------------------


def _map(fn, items, threads):
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def roi_patches(cases, case_rois, s1: Stage1Models, cfg: PipelineConfig, augment=False):
    """Identity patches for every ROI; with ``augment``, also ``augmentations_per_roi`` variants.

    Augmentation draws come from one seeded stream consumed in (case, ROI)
    order, so the result does not depend on ``threads``.
    """
    delta = cfg.stage2.delta_clamp
    jobs = []
    rng = np.random.default_rng(cfg.seed + _SEED_AUGMENT)
    for case, rois in zip(cases, case_rois):
        for roi in rois:
            jobs.append((case, roi, None))
            if augment:
                for _ in range(cfg.stage2.augmentations_per_roi):
                    # each variant gets its own child seed drawn in a fixed order
                    jobs.append((case, roi, int(rng.integers(2 ** 63))))

    def run(job):
        case, roi, seed = job
        if seed is None:
            return extract_roi_patch(case, roi, s1.radiomics, delta)
        return augment_roi_patch(case, roi, s1.radiomics, np.random.default_rng(seed),
                                 cfg.augment, delta)

    return _map(run, jobs, cfg.threads)


def fit_stage2(train_cases, val_cases, s1: Stage1Models, cfg: PipelineConfig, model_dir,
               name=NET_FILE):
    """Build ROI datasets, train the regressor, write it and its log; return ``(net, log)``."""
    train_rois = [detect(c, s1, cfg)[1] for c in train_cases]
    val_rois = [detect(c, s1, cfg)[1] for c in val_cases]
    n_train, n_val = sum(map(len, train_rois)), sum(map(len, val_rois))
    if n_train == 0 or n_val == 0:
        raise PipelineError(f"no ROIs above threshold {cfg.stage1.threshold} "
                            f"(train {n_train}, val {n_val})")
    y_val = {r.y_roi for rois in val_rois for r in rois}
    if len(y_val) < 2:
        raise PipelineError("validation ROIs contain a single class; AUROC monitoring is undefined")
    train = roi_patches(train_cases, train_rois, s1, cfg, augment=True)
    val = roi_patches(val_cases, val_rois, s1, cfg)
    tc = replace(cfg.stage2, seed=cfg.stage2.seed + cfg.seed)
    logger.info("stage 2: %d training patches (%d ROIs), %d validation ROIs", len(train), n_train, n_val)
    net, log = train_stage2(train, val, tc)
    model_dir = Path(model_dir)
    model_dir.mkdir(parents=True, exist_ok=True)
    save_net(model_dir / name, net, extra={"loss": tc.loss, "gamma": tc.gamma, "seed": tc.seed})
    write_log(model_dir / (Path(name).stem + "_" + LOG_FILE), log)
    return load_net(model_dir / name), log


# --------------------------------------------------------------------------
# Inference and evaluation
# --------------------------------------------------------------------------


def infer_case(case: Case, s1: Stage1Models, net: RadHopNet, cfg: PipelineConfig):
    """ROIs with ``p_roi``, ``eps_hat`` and ``final_prob``."""
    _, rois = detect(case, s1, cfg)
    if not rois:
        return []
    patches = [extract_roi_patch(case, r, s1.radiomics, cfg.stage2.delta_clamp) for r in rois]
    return correct_rois(net, rois, patches)


def infer(cases, s1, net, cfg) -> Dict[str, list]:
    return {c.case_id: infer_case(c, s1, net, cfg) for c in cases}


def rois_payload(results: Dict[str, list]) -> dict:
    """JSON-ready inference output, cases in id order."""
    out = []
    for case_id in sorted(results):
        rois = results[case_id]
        out.append({
            "case_id": case_id,
            "patient_score": float(max((r.score for r in rois), default=0.0)),
            "rois": [r.to_dict() for r in rois],
        })
    return {"cases": out}


def write_rois(path, results) -> None:
    Path(path).write_text(json.dumps(rois_payload(results), indent=1, sort_keys=True) + "\n")


def read_rois(path) -> Dict[str, list]:
    from .stage1 import RoiRecord

    data = json.loads(Path(path).read_text())
    return {c["case_id"]: [RoiRecord.from_dict(d) for d in c["rois"]] for c in data["cases"]}


def stage1_only(rois):
    """The same ROIs scored by the Stage-1 probability alone (correction forced to 0)."""
    return [replace(r, eps_hat=0.0, final_prob=r.p_roi) for r in rois]


def evaluate(cases, results: Dict[str, list], overlay_dir=None) -> Dict[str, EvalReport]:
    ids = [c.case_id for c in cases]
    missing = [i for i in ids if i not in results]
    if missing:
        raise KeyError(f"no ROI results for cases {missing}")
    masks = [c.lesion_mask for c in cases]
    corrected = [results[i] for i in ids]
    reports = {
        "stage1": evaluate_cases([stage1_only(r) for r in corrected], masks, ids),
        "stage2": evaluate_cases(corrected, masks, ids),
    }
    if overlay_dir is not None:
        for case, rois in zip(cases, corrected):
            write_overlays(overlay_dir, case, rois, match_lesions(rois, case.lesion_mask, case.case_id))
    return reports
