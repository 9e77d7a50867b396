"""Saab transform: a fixed DC kernel plus PCA-derived AC kernels."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

# eigenvalues below this fraction of the mean patch energy count as rank-deficient
_RANK_TOL = 1e-10


class Saab(BaseEstimator, TransformerMixin):
    """Unsupervised linear transform of flattened patches.

    ``transform`` returns ``[dc, ac_1, ..., ac_K]`` per patch.  With every AC
    channel kept, the kernels form an orthonormal basis and the transform is
    energy preserving.

    Parameters
    ----------
    max_channels : int or None
        Upper bound on the number of AC kernels (``None`` means ``D - 1``).
    energy_threshold : float or None
        Keep the fewest leading AC kernels whose cumulative energy reaches
        this fraction of the total AC energy.  ``None`` keeps every kernel
        up to the rank of the data.
    """

    def __init__(self, max_channels=None, energy_threshold=None):
        self.max_channels = max_channels
        self.energy_threshold = energy_threshold

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        n, d = X.shape
        if n < 2:
            raise ValueError("Saab fitting needs at least 2 patches")
        self.n_features_in_ = d
        self.dc_kernel_ = np.full(d, 1.0 / np.sqrt(d))
        dc = X @ self.dc_kernel_
        ac = X - np.outer(dc, self.dc_kernel_)
        self.dc_energy_ = float(np.var(dc))
        cov = np.cov(ac, rowvar=False, bias=True).reshape(d, d)
        evals, evecs = np.linalg.eigh(cov)
        order = np.argsort(evals)[::-1]
        evals, evecs = np.clip(evals[order], 0.0, None), evecs[:, order]
        total = float(np.trace(cov))
        scale = float(np.mean(np.sum(X * X, axis=1)))
        rank = int(np.sum(evals > _RANK_TOL * scale)) if total > 0 else 0
        k = min(rank, d - 1)
        if self.max_channels is not None:
            k = min(k, int(self.max_channels))
        if self.energy_threshold is not None and k > 0:
            frac = np.cumsum(evals[:k]) / evals[:rank].sum()
            k = min(k, int(np.searchsorted(frac, self.energy_threshold - 1e-12) + 1))
        kernels = evecs[:, :k].T.copy()
        if k:
            # project out the DC direction left by eigensolver round-off, then re-orthonormalize
            kernels -= np.outer(kernels @ self.dc_kernel_, self.dc_kernel_)
            q, r = np.linalg.qr(kernels.T)
            kernels = (q * np.sign(np.diag(r))).T
            # deterministic sign: largest-magnitude entry positive
            flip = np.sign(kernels[np.arange(k), np.argmax(np.abs(kernels), axis=1)])
            kernels *= flip[:, None]
        self.ac_kernels_ = kernels
        self.energies_ = evals[:k].copy()
        self.total_ac_energy_ = float(evals[:rank].sum()) if rank else 0.0
        self.bias_ = float(np.max(np.linalg.norm(X, axis=1)) * (1 + 1e-6))
        return self

    @property
    def n_channels_(self) -> int:
        """Output width: the DC channel plus kept AC channels."""
        return 1 + self.ac_kernels_.shape[0]

    @property
    def kernels_(self) -> np.ndarray:
        """All kernels stacked as rows, DC first."""
        return np.vstack([self.dc_kernel_[None, :], self.ac_kernels_])

    def transform(self, X):
        check_is_fitted(self, "ac_kernels_")
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.n_features_in_:
            raise ValueError(f"patch length {X.shape[-1]} != fitted length {self.n_features_in_}")
        return X @ self.kernels_.T

    @classmethod
    def from_arrays(cls, kernels, energies, bias, dc_energy=0.0, **params):
        """Rebuild a fitted transform from stored kernels (DC row first)."""
        kernels = np.asarray(kernels, dtype=np.float64)
        obj = cls(**params)
        obj.n_features_in_ = kernels.shape[1]
        obj.dc_kernel_ = kernels[0].copy()
        obj.ac_kernels_ = kernels[1:].copy()
        obj.energies_ = np.asarray(energies, dtype=np.float64).copy()
        obj.total_ac_energy_ = float(obj.energies_.sum())
        obj.bias_ = float(bias)
        obj.dc_energy_ = float(dc_energy)
        return obj


def fit_saab(patches, max_channels=None, energy_threshold=None) -> Saab:
    return Saab(max_channels=max_channels, energy_threshold=energy_threshold).fit(patches)


def apply_saab(kernels: Saab, patch) -> np.ndarray:
    patch = np.asarray(patch, dtype=np.float64)
    if patch.ndim != 1:
        raise ValueError("apply_saab expects a single flattened patch")
    return kernels.transform(patch)
