"""Data-driven radiomics: the two-hop Saab cascade, feature selection and LNT.

Feature layout emitted by :class:`RadHop` for one 24x24 window
(``K1`` hop-1 channels including DC, ``K2[c]`` hop-2 channels of hop-1
channel ``c`` including DC)::

    hop1: index = c * 16 + i * 4 + j                 (6x6 block (i, j))
    hop2: index = 16 * K1 + 4 * sum(K2[:c]) + k * 4 + a * 2 + b

where hop-2 block ``(a, b)`` covers hop-1 blocks ``(2a..2a+1, 2b..2b+1)``
flattened row-major.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted, check_X_y

from .saab import Saab

MODEL_VERSION = "radhop-model-v1"


class FeatureBudgetError(ValueError):
    """Raised when the Saab cascade yields fewer raw features than required."""


# --------------------------------------------------------------------------
# RadHop
# --------------------------------------------------------------------------


class RadHop(BaseEstimator, TransformerMixin):
    """Two-hop Saab cascade over square in-plane windows.

    Hop 1 applies one Saab transform to the non-overlapping
    ``block`` x ``block`` tiles of each window; hop 2 applies a separate Saab
    transform per hop-1 channel to the non-overlapping 2x2 groups of tiles.
    """

    def __init__(self, window=24, block=6, energy_threshold=0.995, max_channels=None,
                 min_features=800):
        self.window = window
        self.block = block
        self.energy_threshold = energy_threshold
        self.max_channels = max_channels
        self.min_features = min_features

    @property
    def grid_(self) -> int:
        return self.window // self.block

    def _blocks(self, windows):
        n, g, b = windows.shape[0], self.grid_, self.block
        t = windows.reshape(n, g, b, g, b).transpose(0, 1, 3, 2, 4)
        return t.reshape(n, g, g, b * b)

    @staticmethod
    def _pairs(r1):
        # (n, 4, 4, K) -> (n, K, 2, 2, 4): 2x2 groups of hop-1 tiles per channel
        n, g, _, k = r1.shape
        t = r1.reshape(n, g // 2, 2, g // 2, 2, k).transpose(0, 5, 1, 3, 2, 4)
        return t.reshape(n, k, g // 2, g // 2, 4)

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 3 or X.shape[1:] != (self.window, self.window):
            raise ValueError(f"expected windows of shape (n, {self.window}, {self.window})")
        if self.window % self.block or self.grid_ % 2:
            raise ValueError("window must tile into an even number of blocks")
        blocks = self._blocks(X)
        self.hop1_ = Saab(self.max_channels, self.energy_threshold).fit(
            blocks.reshape(-1, self.block ** 2))
        r1 = self.hop1_.transform(blocks)
        pairs = self._pairs(r1)
        self.hop2_ = [
            Saab(None, self.energy_threshold).fit(pairs[:, c].reshape(-1, 4))
            for c in range(self.hop1_.n_channels_)
        ]
        self._check_budget()
        return self

    def _check_budget(self):
        if self.n_features_out_ < self.min_features:
            raise FeatureBudgetError(
                f"RadHop yields {self.n_features_out_} raw features < {self.min_features}; "
                "raise energy_threshold or max_channels"
            )

    @property
    def n_features_out_(self) -> int:
        check_is_fitted(self, "hop1_")
        g2 = self.grid_ ** 2
        return g2 * self.hop1_.n_channels_ + (g2 // 4) * sum(h.n_channels_ for h in self.hop2_)

    def _cascade(self, r1):
        """Assemble the feature vector from hop-1 responses of shape (n, g, g, K1)."""
        n = r1.shape[0]
        parts = [r1.transpose(0, 3, 1, 2).reshape(n, -1)]
        pairs = self._pairs(r1)
        for c, hop in enumerate(self.hop2_):
            r2 = pairs[:, c] @ hop.kernels_.T  # (n, 2, 2, K2)
            parts.append(r2.transpose(0, 3, 1, 2).reshape(n, -1))
        return np.concatenate(parts, axis=1)

    def transform(self, X):
        """Features of explicit windows, shape (n, window, window)."""
        check_is_fitted(self, "hop1_")
        X = np.asarray(X, dtype=np.float64)
        return self._cascade(self.hop1_.transform(self._blocks(X)))

    def hop1_response_map(self, image):
        """Hop-1 responses of every ``block`` x ``block`` tile anchored at each pixel."""
        image = np.asarray(image, dtype=np.float64)
        tiles = sliding_window_view(image, (self.block, self.block))
        h, w = tiles.shape[:2]
        return (tiles.reshape(h * w, -1) @ self.hop1_.kernels_.T).reshape(h, w, -1)

    def transform_image(self, image, top_left, response_map=None):
        """Features of the windows whose top-left corners are given as (n, 2) rows.

        Every window must lie inside ``image``.
        """
        check_is_fitted(self, "hop1_")
        if response_map is None:
            response_map = self.hop1_response_map(image)
        top_left = np.asarray(top_left, dtype=np.intp).reshape(-1, 2)
        offs = np.arange(self.grid_) * self.block
        ys = top_left[:, 0, None, None] + offs[None, :, None]
        xs = top_left[:, 1, None, None] + offs[None, None, :]
        return self._cascade(response_map[ys, xs])

    def to_arrays(self):
        arrays = {"hop1.kernels": self.hop1_.kernels_, "hop1.energies": self.hop1_.energies_}
        for c, h in enumerate(self.hop2_):
            arrays[f"hop2.{c}.kernels"] = h.kernels_
            arrays[f"hop2.{c}.energies"] = h.energies_
        meta = {
            "window": self.window, "block": self.block,
            "energy_threshold": self.energy_threshold, "max_channels": self.max_channels,
            "min_features": self.min_features,
            "hop1_bias": self.hop1_.bias_, "hop2_bias": [h.bias_ for h in self.hop2_],
            "n_features_out": self.n_features_out_,
        }
        return meta, arrays

    @classmethod
    def from_arrays(cls, meta, arrays):
        obj = cls(meta["window"], meta["block"], meta["energy_threshold"],
                  meta["max_channels"], meta["min_features"])
        obj.hop1_ = Saab.from_arrays(arrays["hop1.kernels"], arrays["hop1.energies"],
                                     meta["hop1_bias"])
        obj.hop2_ = [
            Saab.from_arrays(arrays[f"hop2.{c}.kernels"], arrays[f"hop2.{c}.energies"], b)
            for c, b in enumerate(meta["hop2_bias"])
        ]
        return obj


def window_top_left(center_y, center_x, window=24):
    """Top-left corner of the window centred at a pixel: rows ``cy-12 .. cy+11``."""
    half = window // 2
    return np.asarray(center_y) - half, np.asarray(center_x) - half


def extract_window_features(model: RadHop, image, center):
    """Raw features of the window centred at ``center``, edge-replicated at borders."""
    half = model.window // 2
    padded = np.pad(np.asarray(image, dtype=np.float64), half, mode="edge")
    cy, cx = center
    win = padded[cy:cy + model.window, cx:cx + model.window]
    return model.transform(win[None])[0]


# --------------------------------------------------------------------------
# Discriminant feature test and selection
# --------------------------------------------------------------------------


def _binary_entropy(pos, total):
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(total > 0, pos / np.maximum(total, 1), 0.0)
        h = -(p * np.log2(np.where(p > 0, p, 1.0)) + (1 - p) * np.log2(np.where(p < 1, 1 - p, 1.0)))
    return h


def dft_scores(X, y, n_bins=32, chunk=128):
    """Discriminant-feature-test scores for every column of ``X`` (lower is better).

    Each column is split at the ``n_bins - 1`` uniform boundaries between its
    min and max; the score is the smallest sample-weighted binary entropy of
    the two sides, in bits.
    """
    X = np.asarray(X)
    y = np.asarray(y).astype(np.float64).ravel()
    if X.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    if np.unique(y).size < 2:
        raise ValueError("both classes must be present")
    n, f = X.shape
    scores = np.empty(f)
    for s in range(0, f, chunk):
        cols = np.asarray(X[:, s:s + chunk], dtype=np.float64)
        m = cols.shape[1]
        lo, hi = cols.min(axis=0), cols.max(axis=0)
        span = np.where(hi > lo, hi - lo, 1.0)
        bins = np.clip(np.floor((cols - lo) / span * n_bins).astype(np.int64), 0, n_bins - 1)
        bins += np.arange(m) * n_bins
        total = np.bincount(bins.ravel(), minlength=m * n_bins).reshape(m, n_bins)
        pos = np.bincount(bins.ravel(), weights=np.repeat(y[:, None], m, axis=1).ravel(),
                          minlength=m * n_bins).reshape(m, n_bins)
        left_n = np.cumsum(total, axis=1)[:, :-1]
        left_p = np.cumsum(pos, axis=1)[:, :-1]
        right_n, right_p = n - left_n, pos.sum(axis=1, keepdims=True) - left_p
        weighted = (left_n * _binary_entropy(left_p, left_n)
                    + right_n * _binary_entropy(right_p, right_n)) / n
        scores[s:s + m] = weighted.min(axis=1)
    return scores


def dft_score(feature_column, labels, n_bins=32) -> float:
    return float(dft_scores(np.asarray(feature_column, dtype=np.float64)[:, None], labels, n_bins)[0])


def select_top_k(scores, k=800) -> np.ndarray:
    """Indices of the ``k`` smallest scores (ties to the lower index), ascending."""
    scores = np.asarray(scores)
    if scores.size < k:
        raise ValueError(f"cannot select {k} of {scores.size} features")
    return np.sort(np.argsort(scores, kind="stable")[:k])


class DFTSelector(BaseEstimator, TransformerMixin):
    """Keep the ``k`` most discriminant columns by the entropy-based feature test."""

    def __init__(self, k=800, n_bins=32):
        self.k = k
        self.n_bins = n_bins

    def fit(self, X, y):
        self.scores_ = dft_scores(X, y, self.n_bins)
        self.kept_indices_ = select_top_k(self.scores_, self.k)
        self.n_features_in_ = self.scores_.size
        return self

    def transform(self, X):
        check_is_fitted(self, "kept_indices_")
        return np.asarray(X)[..., self.kept_indices_]


# --------------------------------------------------------------------------
# Linear Normal Transform
# --------------------------------------------------------------------------


def ridge_with_intercept(X, y, ridge):
    """Solve ``(A^T A + ridge * P) w = A^T y`` with ``A = [X 1]`` and an unpenalized intercept."""
    A = np.hstack([X, np.ones((X.shape[0], 1))])
    if ridge > 0:
        P = np.eye(A.shape[1]) * ridge
        P[-1, -1] = 0.0
        sol = np.linalg.solve(A.T @ A + P, A.T @ y)
    else:
        sol = np.linalg.lstsq(A, y, rcond=None)[0]
    return sol[:-1], float(sol[-1])


class LNT(BaseEstimator, TransformerMixin):
    """Supervised compression: each output is a ridge fit on a random column subset.

    Parameters
    ----------
    n_out : int
        Number of output features.
    subset : int
        Columns drawn (without replacement) per output.
    ridge : float
        L2 penalty on the weights; the intercept is not penalized.
    random_state : int
        Seed for the subset draws.
    """

    def __init__(self, n_out=20, subset=200, ridge=1e-6, random_state=0):
        self.n_out = n_out
        self.subset = subset
        self.ridge = ridge
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        n, d = X.shape
        if n <= self.subset:
            raise ValueError(f"LNT needs more than {self.subset} samples, got {n}")
        if d < self.subset:
            raise ValueError(f"LNT subset {self.subset} exceeds input width {d}")
        rng = np.random.default_rng(self.random_state)
        self.subsets_ = np.empty((self.n_out, self.subset), dtype=np.intp)
        self.weights_ = np.empty((self.n_out, self.subset))
        self.intercepts_ = np.empty(self.n_out)
        for j in range(self.n_out):
            idx = np.sort(rng.choice(d, size=self.subset, replace=False))
            w, b = ridge_with_intercept(X[:, idx], y, self.ridge)
            self.subsets_[j], self.weights_[j], self.intercepts_[j] = idx, w, b
        self.n_features_in_ = d
        return self

    def transform(self, X):
        check_is_fitted(self, "weights_")
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[-1]}")
        return np.einsum("...js,js->...j", X[..., self.subsets_], self.weights_) + self.intercepts_


def fit_lnt(selected, labels, n_out=20, subset=200, ridge=1e-6, seed=0) -> LNT:
    return LNT(n_out, subset, ridge, seed).fit(selected, labels)


def apply_lnt(p: LNT, feature_vector) -> np.ndarray:
    feature_vector = np.asarray(feature_vector, dtype=np.float64)
    if feature_vector.shape != (p.n_features_in_,):
        raise ValueError(f"expected a vector of length {p.n_features_in_}")
    return p.transform(feature_vector)


# --------------------------------------------------------------------------
# Per-modality bundle and serialization
# --------------------------------------------------------------------------


class ModalityRadiomics:
    """Fitted RadHop, selector and LNT for one modality."""

    def __init__(self, radhop: RadHop, selector: DFTSelector = None, lnt: LNT = None):
        self.radhop = radhop
        self.selector = selector
        self.lnt = lnt

    def selected(self, raw):
        return raw[..., self.selector.kept_indices_]

    def compact(self, raw):
        return self.lnt.transform(self.selected(raw))


class _Blob:
    def __init__(self):
        self.chunks, self.index, self.offset = [], {}, 0

    def add(self, name, array):
        data = np.ascontiguousarray(array, dtype="<f4").tobytes()
        self.index[name] = {"offset": self.offset, "shape": list(np.shape(array))}
        self.chunks.append(data)
        self.offset += len(data)

    def bytes(self):
        return b"".join(self.chunks)


def _read_blob(raw, index):
    out = {}
    for name, spec in index.items():
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=spec["offset"])
        out[name] = arr.astype(np.float64).reshape(spec["shape"])
    return out


def save_radiomics(path, models, seed=None) -> None:
    """Write ``path`` (JSON descriptor) and ``path.bin`` (little-endian f32 arrays)."""
    path = Path(path)
    blob, modalities = _Blob(), []
    for name, m in models.items():
        meta, arrays = m.radhop.to_arrays()
        for key, arr in arrays.items():
            blob.add(f"{name}.{key}", arr)
        entry = {"name": name, "radhop": meta}
        if m.selector is not None:
            blob.add(f"{name}.selector.scores", m.selector.scores_)
            entry["selector"] = {"k": m.selector.k, "n_bins": m.selector.n_bins,
                                 "kept_indices": m.selector.kept_indices_.tolist()}
        if m.lnt is not None:
            blob.add(f"{name}.lnt.weights", m.lnt.weights_)
            blob.add(f"{name}.lnt.intercepts", m.lnt.intercepts_)
            entry["lnt"] = {"n_out": m.lnt.n_out, "subset": m.lnt.subset, "ridge": m.lnt.ridge,
                            "seed": m.lnt.random_state, "n_features_in": m.lnt.n_features_in_,
                            "subsets": m.lnt.subsets_.tolist()}
        modalities.append(entry)
    sidecar = path.with_name(path.name + ".bin")
    descriptor = {"version": MODEL_VERSION, "seed": seed, "arrays": sidecar.name,
                  "index": blob.index, "modalities": modalities}
    sidecar.write_bytes(blob.bytes())
    path.write_text(json.dumps(descriptor, indent=1) + "\n")


def load_radiomics(path) -> dict:
    path = Path(path)
    desc = json.loads(path.read_text())
    if desc.get("version") != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported model version {desc.get('version')!r}")
    arrays = _read_blob((path.parent / desc["arrays"]).read_bytes(), desc["index"])
    models = {}
    for entry in desc["modalities"]:
        name = entry["name"]
        sub = {k[len(name) + 1:]: v for k, v in arrays.items() if k.startswith(name + ".")}
        radhop = RadHop.from_arrays(entry["radhop"], sub)
        selector = lnt = None
        if "selector" in entry:
            s = entry["selector"]
            selector = DFTSelector(s["k"], s["n_bins"])
            selector.scores_ = sub["selector.scores"]
            selector.kept_indices_ = np.asarray(s["kept_indices"], dtype=np.intp)
            selector.n_features_in_ = selector.scores_.size
        if "lnt" in entry:
            s = entry["lnt"]
            lnt = LNT(s["n_out"], s["subset"], s["ridge"], s["seed"])
            lnt.subsets_ = np.asarray(s["subsets"], dtype=np.intp)
            lnt.weights_ = sub["lnt.weights"]
            lnt.intercepts_ = sub["lnt.intercepts"]
            lnt.n_features_in_ = s["n_features_in"]
        models[name] = ModalityRadiomics(radhop, selector, lnt)
    return models
