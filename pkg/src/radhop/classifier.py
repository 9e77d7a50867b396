"""Voxel classifiers: histogram gradient-boosted trees and an L2 logistic fallback."""
from __future__ import annotations

import json
from pathlib import Path

import numba
import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

CLASSIFIER_VERSION = "voxel-classifier-v1"


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _check_binary(y):
    y = np.asarray(y).ravel()
    classes = np.unique(y)
    if classes.size != 2 or not np.all(np.isin(classes, (0, 1))):
        raise ValueError("labels must contain both classes 0 and 1")
    return y.astype(np.float64)


@numba.njit(cache=True)
def _histogram(xbt, rows, grad, hess, n_bins):
    # xbt is feature-major (n_features, n_samples) so each feature's histogram stays in cache
    n_feat = xbt.shape[0]
    hist = np.zeros((n_feat, n_bins, 3))
    g, h = grad[rows], hess[rows]
    for f in range(n_feat):
        col = xbt[f]
        hf = hist[f]
        for k in range(rows.size):
            b = col[rows[k]]
            hf[b, 0] += g[k]
            hf[b, 1] += h[k]
            hf[b, 2] += 1.0
    return hist


@numba.njit(cache=True)
def _bin_column(edges, x, out):
    # branch-free count of edges strictly below x; equals searchsorted(side="left")
    for i in range(x.size):
        v, c = x[i], 0
        for j in range(edges.size):
            c += edges[j] < v
        out[i] = c


class GradientBoostingVoxelClassifier(BaseEstimator, ClassifierMixin):
    """Binary gradient-boosted regression trees under logistic loss.

    Splits are searched on per-feature quantile bins (``max_bins``); a sample
    goes left when ``x[feature] <= threshold``.  Leaf values are Newton
    steps ``-G / (H + reg_lambda)`` shrunk by ``learning_rate``.
    """

    def __init__(self, n_estimators=200, max_depth=3, learning_rate=0.1, subsample=0.8,
                 min_samples_leaf=20, max_bins=64, reg_lambda=1.0, random_state=0):
        self.n_estimators = n_estimators
        self.max_depth = max_depth
        self.learning_rate = learning_rate
        self.subsample = subsample
        self.min_samples_leaf = min_samples_leaf
        self.max_bins = max_bins
        self.reg_lambda = reg_lambda
        self.random_state = random_state

    # -- binning -----------------------------------------------------------

    def _fit_edges(self, X, rng):
        n = X.shape[0]
        rows = np.sort(rng.choice(n, size=min(n, 20000), replace=False))
        sample = np.asarray(X[rows], dtype=np.float64)
        qs = np.linspace(0, 1, self.max_bins + 1)[1:-1]
        edges = np.full((X.shape[1], self.max_bins - 1), np.inf)
        n_edges = np.zeros(X.shape[1], dtype=np.int64)
        for j in range(X.shape[1]):
            e = np.unique(np.quantile(sample[:, j], qs))
            edges[j, :e.size] = e
            n_edges[j] = e.size
        return edges, n_edges

    def _bin(self, X):
        """Bin indices, feature-major: shape (n_features, n_samples)."""
        out = np.empty(X.shape[::-1], dtype=np.uint8)
        for j0 in range(0, X.shape[1], 64):
            block = np.ascontiguousarray(X[:, j0:j0 + 64].T, dtype=np.float64)
            for j, col in enumerate(block, start=j0):
                _bin_column(self.bin_edges_[j, :self.n_edges_[j]], col, out[j])
        return out

    # -- training ----------------------------------------------------------

    def fit(self, X, y):
        y = _check_binary(y)
        X = np.asarray(X)
        if X.ndim != 2 or X.shape[0] != y.size:
            raise ValueError("X must be 2-D with one row per label")
        if self.max_bins > 256:
            raise ValueError("max_bins must be <= 256")
        rng = np.random.default_rng(self.random_state)
        self.n_features_in_ = X.shape[1]
        self.classes_ = np.array([0, 1])
        self.bin_edges_, self.n_edges_ = self._fit_edges(X, rng)
        xb = self._bin(X)
        rate = y.mean()
        self.base_score_ = float(np.log(rate / (1 - rate)))
        self.trees_ = []
        raw = np.full(y.size, self.base_score_)
        n_sub = max(1, int(round(self.subsample * y.size)))
        for _ in range(self.n_estimators):
            p = _sigmoid(raw)
            grad, hess = p - y, np.maximum(p * (1 - p), 1e-16)
            if n_sub < y.size:
                rows = np.sort(rng.choice(y.size, size=n_sub, replace=False))
            else:
                rows = np.arange(y.size)
            tree = self._grow(xb, rows, grad, hess)
            self.trees_.append(tree)
            raw += self._predict_tree_binned(tree, xb)
        return self

    def _best_split(self, hist):
        lam, m = self.reg_lambda, self.min_samples_leaf
        cum = np.cumsum(hist, axis=1)
        G, H, C = cum[:, -1, 0:1], cum[:, -1, 1:2], cum[:, -1, 2:3]
        gl, hl, cl = cum[:, :-1, 0], cum[:, :-1, 1], cum[:, :-1, 2]
        gr, hr, cr = G - gl, H - hl, C - cl
        gain = gl ** 2 / (hl + lam) + gr ** 2 / (hr + lam) - G ** 2 / (H + lam)
        gain = np.where((cl >= m) & (cr >= m), gain, -np.inf)
        best = int(np.argmax(gain))
        f, b = divmod(best, gain.shape[1])
        return f, b, gain[f, b]

    def _grow(self, xb, rows, grad, hess):
        nodes = {"feature": [], "bin": [], "threshold": [], "left": [], "right": [], "value": []}

        def new_node():
            for key in ("feature", "bin", "left", "right"):
                nodes[key].append(-1)
            nodes["threshold"].append(0.0)
            nodes["value"].append(0.0)
            return len(nodes["value"]) - 1

        def make_leaf(i, r):
            G, H = grad[r].sum(), hess[r].sum()
            nodes["value"][i] = float(-self.learning_rate * G / (H + self.reg_lambda))

        # frontier of (node id, rows, histogram); the larger child's histogram comes by subtraction
        root = new_node()
        hist0 = _histogram(xb, rows, grad, hess, self.max_bins) if self.max_depth > 0 else None
        frontier = [(root, rows, hist0)]
        for depth in range(self.max_depth + 1):
            nxt = []
            for i, r, hist in frontier:
                if depth == self.max_depth or r.size < 2 * self.min_samples_leaf:
                    make_leaf(i, r)
                    continue
                f, b, gain = self._best_split(hist)
                if not np.isfinite(gain) or gain <= 0:
                    make_leaf(i, r)
                    continue
                go_left = xb[f, r] <= b
                lr, rr = r[go_left], r[~go_left]
                if depth + 1 == self.max_depth:
                    lh = rh = None
                elif lr.size <= rr.size:
                    lh = _histogram(xb, lr, grad, hess, self.max_bins)
                    rh = hist - lh
                else:
                    rh = _histogram(xb, rr, grad, hess, self.max_bins)
                    lh = hist - rh
                li, ri = new_node(), new_node()
                nodes["feature"][i], nodes["bin"][i] = int(f), int(b)
                nodes["threshold"][i] = float(self.bin_edges_[f, b])
                nodes["left"][i], nodes["right"][i] = li, ri
                nxt += [(li, lr, lh), (ri, rr, rh)]
            frontier = nxt
        return {k: np.asarray(v) for k, v in nodes.items()}

    # -- prediction --------------------------------------------------------

    @staticmethod
    def _walk(tree, n, test):
        node = np.zeros(n, dtype=np.intp)
        feature, left, right = tree["feature"], tree["left"], tree["right"]
        while True:
            feat = feature[node]
            internal = feat >= 0
            if not internal.any():
                return tree["value"][node]
            idx = np.flatnonzero(internal)
            go = test(idx, feat[idx], node[idx])
            node[idx] = np.where(go, left[node[idx]], right[node[idx]])

    def _predict_tree_binned(self, tree, xb):
        return self._walk(tree, xb.shape[1],
                          lambda idx, f, nd: xb[f, idx] <= tree["bin"][nd])

    def decision_function(self, X):
        check_is_fitted(self, "trees_")
        X = np.asarray(X)
        if X.shape[-1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[-1]}")
        raw = np.full(X.shape[0], self.base_score_)
        for tree in self.trees_:
            raw += self._walk(tree, X.shape[0],
                              lambda idx, f, nd: X[idx, f] <= tree["threshold"][nd])
        return raw

    def predict_proba(self, X):
        p = _sigmoid(self.decision_function(X))
        return np.column_stack([1 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(int)

    def to_dict(self):
        trees = [{k: tree[k].tolist() for k in ("feature", "threshold", "left", "right", "value")}
                 for tree in self.trees_]
        return {"kind": "gbdt", "params": self.get_params(), "n_features_in": self.n_features_in_,
                "base_score": self.base_score_, "trees": trees}

    @classmethod
    def from_dict(cls, d):
        obj = cls(**d["params"])
        obj.n_features_in_ = d["n_features_in"]
        obj.classes_ = np.array([0, 1])
        obj.base_score_ = d["base_score"]
        obj.trees_ = [{k: np.asarray(v, dtype=np.float64 if k in ("threshold", "value") else np.intp)
                       for k, v in t.items()} for t in d["trees"]]
        return obj


class LogisticVoxelClassifier(BaseEstimator, ClassifierMixin):
    """L2-regularized logistic regression on standardized features, fit by gradient descent."""

    def __init__(self, alpha=1e-4, tol=1e-6, max_iter=20000):
        self.alpha = alpha
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, y):
        y = _check_binary(y)
        X = np.asarray(X, dtype=np.float64)
        self.n_features_in_ = X.shape[1]
        self.classes_ = np.array([0, 1])
        self.mean_ = X.mean(axis=0)
        self.scale_ = X.std(axis=0)
        self.scale_[self.scale_ == 0] = 1.0
        Z = np.hstack([(X - self.mean_) / self.scale_, np.ones((X.shape[0], 1))])
        n = Z.shape[0]
        # step 1/L with L the Lipschitz constant of the mean logistic loss gradient
        step = 1.0 / (0.25 * np.linalg.norm(Z, 2) ** 2 / n + self.alpha)
        w = np.zeros(Z.shape[1])
        reg = np.full(Z.shape[1], self.alpha)
        reg[-1] = 0.0
        for it in range(self.max_iter):
            g = Z.T @ (_sigmoid(Z @ w) - y) / n + reg * w
            if np.max(np.abs(g)) < self.tol:
                break
            w -= step * g
        self.n_iter_ = it + 1
        self.coef_ = w[:-1] / self.scale_
        self.intercept_ = float(w[-1] - self.coef_ @ self.mean_)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        return np.asarray(X, dtype=np.float64) @ self.coef_ + self.intercept_

    def predict_proba(self, X):
        p = _sigmoid(self.decision_function(X))
        return np.column_stack([1 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(int)

    def to_dict(self):
        return {"kind": "logistic", "params": self.get_params(), "n_features_in": self.n_features_in_,
                "coef": self.coef_.tolist(), "intercept": self.intercept_}

    @classmethod
    def from_dict(cls, d):
        obj = cls(**d["params"])
        obj.n_features_in_ = d["n_features_in"]
        obj.classes_ = np.array([0, 1])
        obj.coef_ = np.asarray(d["coef"], dtype=np.float64)
        obj.intercept_ = d["intercept"]
        return obj


def make_voxel_classifier(kind="gbdt", **params):
    if kind == "gbdt":
        return GradientBoostingVoxelClassifier(**params)
    if kind == "logistic":
        return LogisticVoxelClassifier(**params)
    raise ValueError(f"unknown classifier kind {kind!r}")


def save_classifier(path, clf) -> None:
    payload = {"version": CLASSIFIER_VERSION, **clf.to_dict()}
    Path(path).write_text(json.dumps(payload) + "\n")


def load_classifier(path):
    d = json.loads(Path(path).read_text())
    if d.get("version") != CLASSIFIER_VERSION:
        raise ValueError(f"{path}: unsupported classifier version {d.get('version')!r}")
    cls = {"gbdt": GradientBoostingVoxelClassifier, "logistic": LogisticVoxelClassifier}[d["kind"]]
    return cls.from_dict(d)
