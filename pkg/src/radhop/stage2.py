"""Training and inference for the residue regressor."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from typing import List, Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .metrics import auroc
from .net import (LOSSES, RMSProp, RadHopNet, apply_correction, default_layers,
                  predict_residue, wrmse_loss)
from .patches import stack_patches

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4096
    lr: float = 1e-4
    rho: float = 0.9
    eps: float = 1e-8
    epochs: int = 20
    gamma: float = 0.95
    loss: str = "wrmse"
    delta_clamp: float = 1e-4
    seed: int = 0
    augmentations_per_roi: int = 4
    conv_channels: tuple = (24, 24, 24, 24, 32)
    fc_units: tuple = (64, 8)
    # rows per forward/backward chunk inside a mini-batch; bounds memory only
    chunk: int = 512

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")


@dataclass
class EpochLog:
    epoch: int
    mean_loss: float
    val_auroc: float


def _loss(cfg, y_hat, target, n_total):
    gamma = cfg.gamma if cfg.loss == "wrmse" else 0.0
    return wrmse_loss(y_hat, target, gamma, n_total)


def corrected_probs(net, X, p_roi, batch_size=512):
    return apply_correction(p_roi, predict_residue(net.predict(X, batch_size)))


def train_step(net: RadHopNet, opt: RMSProp, X, target, cfg: TrainConfig) -> float:
    """One optimizer step on a mini-batch, evaluated in fixed-order chunks."""
    n = len(X)
    total, grads = 0.0, None
    for s in range(0, n, cfg.chunk):
        y_hat, cache = net.forward(X[s:s + cfg.chunk])
        loss, dy = _loss(cfg, y_hat, target[s:s + cfg.chunk], n)
        g = net.backward(cache, dy)
        total += loss
        grads = g if grads is None else [(a + c, b + d) for (a, b), (c, d) in zip(grads, g)]
    net.params = opt.step(net.params, grads)
    return total


def train_stage2(train_patches: Sequence, val_patches: Sequence, cfg: TrainConfig = TrainConfig()):
    """Fit the regressor; return ``(best_net, log)``.

    ``train_patches`` carry mapped targets; ``val_patches`` carry ``p_roi`` and
    ``y_roi``.  After each epoch the validation AUROC of the corrected ROI
    probabilities is recorded and the best epoch's weights are kept (ties go
    to the earlier epoch).
    """
    if len(train_patches) == 0 or len(val_patches) == 0:
        raise ValueError("training and validation sets must be non-empty")
    y_val = np.array([p.y_roi for p in val_patches])
    if np.unique(y_val).size < 2:
        raise ValueError("validation set must contain both ROI classes")
    X = stack_patches(train_patches)
    target = np.array([p.target for p in train_patches], dtype=np.float64)
    Xv = stack_patches(val_patches)
    pv = np.array([p.p_roi for p in val_patches], dtype=np.float64)

    layers = default_layers(X.shape[-1], cfg.conv_channels, cfg.fc_units, X.shape[1])
    net = RadHopNet(layers, X.shape[1:], seed=cfg.seed)
    opt = RMSProp(net.params, cfg.lr, cfg.rho, cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    best, best_auc, log = net.copy(), -np.inf, []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(X))
        epoch_loss = 0.0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            epoch_loss += train_step(net, opt, X[idx], target[idx], cfg) * len(idx)
        val_auc = auroc(corrected_probs(net, Xv, pv), y_val)
        log.append(EpochLog(epoch, epoch_loss / len(X), val_auc))
        logger.info("epoch %d loss %.6f val_auroc %.4f", epoch, epoch_loss / len(X), val_auc)
        if val_auc > best_auc:
            best, best_auc = net.copy(), val_auc
    return best, log


def write_log(path, log: List[EpochLog]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_loss", "val_auroc"])
        for row in log:
            w.writerow([row.epoch, repr(row.mean_loss), repr(row.val_auroc)])


def correct_rois(net: RadHopNet, rois, patches):
    """Attach ``eps_hat`` and ``final_prob`` to each ROI (patches in ROI order)."""
    if not rois:
        return []
    eps_hat = predict_residue(net.predict(stack_patches(patches)))
    return [replace(r, eps_hat=float(e), final_prob=float(apply_correction(r.p_roi, e)))
            for r, e in zip(rois, eps_hat)]


class ResidueRegressor(BaseEstimator, RegressorMixin):
    """Estimator wrapper: ``fit`` on patch grids and mapped targets, ``predict`` the raw output.

    Validation data for epoch selection is passed to ``fit`` as
    ``X_val``/``p_val``/``y_val``; without it the last epoch is kept.
    """

    def __init__(self, batch_size=4096, lr=1e-4, epochs=20, gamma=0.95, loss="wrmse", seed=0,
                 conv_channels=(24, 24, 24, 24, 32), fc_units=(64, 8)):
        self.batch_size = batch_size
        self.lr = lr
        self.epochs = epochs
        self.gamma = gamma
        self.loss = loss
        self.seed = seed
        self.conv_channels = conv_channels
        self.fc_units = fc_units

    def _config(self):
        return TrainConfig(batch_size=self.batch_size, lr=self.lr, epochs=self.epochs,
                           gamma=self.gamma, loss=self.loss, seed=self.seed,
                           conv_channels=tuple(self.conv_channels), fc_units=tuple(self.fc_units))

    def fit(self, X, y, X_val=None, p_val=None, y_val=None):
        from .patches import RoiPatchTensor

        X = np.asarray(X, dtype=np.float64)
        train = [RoiPatchTensor(g, ("", i), float(t)) for i, (g, t) in enumerate(zip(X, y))]
        if X_val is None:
            cfg = self._config()
            layers = default_layers(X.shape[-1], cfg.conv_channels, cfg.fc_units, X.shape[1])
            net = RadHopNet(layers, X.shape[1:], seed=cfg.seed)
            opt = RMSProp(net.params, cfg.lr, cfg.rho, cfg.eps)
            rng = np.random.default_rng(cfg.seed)
            target = np.asarray(y, dtype=np.float64)
            for _ in range(cfg.epochs):
                order = rng.permutation(len(X))
                for s in range(0, len(order), cfg.batch_size):
                    idx = order[s:s + cfg.batch_size]
                    train_step(net, opt, X[idx], target[idx], cfg)
            self.net_, self.log_ = net, []
        else:
            val = [RoiPatchTensor(g, ("", i), None, float(p), int(t))
                   for i, (g, p, t) in enumerate(zip(np.asarray(X_val), p_val, y_val))]
            self.net_, self.log_ = train_stage2(train, val, self._config())
        return self

    def predict(self, X):
        check_is_fitted(self, "net_")
        return self.net_.predict(X)

    def predict_residue(self, X):
        return predict_residue(self.predict(X))
