"""The Stage-2 residue regressor: valid 3x3 convolutions and dense layers in numpy.

Tensors are channels-last: a batch is ``(B, 13, 13, 60)``.  ``forward``
returns predictions plus a cache; ``backward`` consumes the cache and
``dL/dy_hat`` and returns gradients in the same layout as ``params``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

NET_VERSION = "radhopnet-v1"


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv3x3_valid | relu | flatten | fc | linear_out
    n_in: int = 0
    n_out: int = 0


def default_layers(in_channels=60, conv_channels=(24, 24, 24, 24, 32), fc_units=(64, 8),
                   in_size=13) -> List[LayerSpec]:
    layers, c = [], in_channels
    for width in conv_channels:
        layers += [LayerSpec("conv3x3_valid", c, width), LayerSpec("relu")]
        c = width
    size = in_size - 2 * len(conv_channels)
    if size < 1:
        raise ValueError("too many valid convolutions for the input size")
    d = size * size * c
    layers.append(LayerSpec("flatten", d, d))
    for units in fc_units:
        layers += [LayerSpec("fc", d, units), LayerSpec("relu")]
        d = units
    layers.append(LayerSpec("linear_out", d, 1))
    return layers


# --------------------------------------------------------------------------
# Layer primitives
# --------------------------------------------------------------------------


def conv3x3_forward(x, W, b):
    """Valid 3x3 convolution; x (B, H, W, Ci), W (3, 3, Ci, Co)."""
    B, H, Wd, ci = x.shape
    ho, wo, co = H - 2, Wd - 2, W.shape[3]
    out = np.broadcast_to(b, (B * ho * wo, co)).copy()
    for i in range(3):
        for j in range(3):
            out += _shifted(x, i, j, ho, wo) @ W[i, j]
    return out.reshape(B, ho, wo, co)


def _shifted(x, i, j, ho, wo):
    return np.ascontiguousarray(x[:, i:i + ho, j:j + wo, :]).reshape(-1, x.shape[3])


def conv3x3_backward(x, W, dout):
    B, H, Wd, ci = x.shape
    ho, wo, co = dout.shape[1:]
    d2 = dout.reshape(-1, co)
    dW = np.empty_like(W)
    dx = np.zeros_like(x)
    for i in range(3):
        for j in range(3):
            dW[i, j] = _shifted(x, i, j, ho, wo).T @ d2
            dx[:, i:i + ho, j:j + wo, :] += (d2 @ W[i, j].T).reshape(B, ho, wo, ci)
    return dx, dW, d2.sum(axis=0)


def _glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class RadHopNet:
    """Five valid convolutions, two hidden dense layers and a linear output unit."""

    def __init__(self, layers: Optional[List[LayerSpec]] = None, in_shape=(13, 13, 60), seed=0):
        self.in_shape = tuple(in_shape)
        self.layers = list(layers) if layers is not None else default_layers(in_shape[2], in_size=in_shape[0])
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.params: List[Tuple[np.ndarray, np.ndarray]] = []
        for spec in self.layers:
            if spec.kind == "conv3x3_valid":
                W = _glorot(rng, (3, 3, spec.n_in, spec.n_out), 9 * spec.n_in, 9 * spec.n_out)
                self.params.append((W, np.zeros(spec.n_out)))
            elif spec.kind in ("fc", "linear_out"):
                W = _glorot(rng, (spec.n_in, spec.n_out), spec.n_in, spec.n_out)
                self.params.append((W, np.zeros(spec.n_out)))

    @property
    def n_params(self) -> int:
        return int(sum(W.size + b.size for W, b in self.params))

    @property
    def spatial_trace(self) -> List[int]:
        sizes = [self.in_shape[0]]
        for spec in self.layers:
            if spec.kind == "conv3x3_valid":
                sizes.append(sizes[-1] - 2)
        return sizes

    def copy(self) -> "RadHopNet":
        other = RadHopNet.__new__(RadHopNet)
        other.in_shape, other.layers, other.seed = self.in_shape, list(self.layers), self.seed
        other.params = [(W.copy(), b.copy()) for W, b in self.params]
        return other

    def forward(self, X, keep_cache=True):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 4 or X.shape[1:] != self.in_shape:
            raise ValueError(f"expected input (B, {', '.join(map(str, self.in_shape))}), got {X.shape}")
        cache, h, p = [], X, 0
        for spec in self.layers:
            if keep_cache:
                cache.append(h)
            if spec.kind == "conv3x3_valid":
                h = conv3x3_forward(h, *self.params[p])
                p += 1
            elif spec.kind == "relu":
                h = np.maximum(h, 0.0)
            elif spec.kind == "flatten":
                h = h.reshape(h.shape[0], -1)
            else:
                W, b = self.params[p]
                h = h @ W + b
                p += 1
        return h[:, 0], (cache if keep_cache else None)

    def conv_features(self, X):
        """Activations after the last convolution block, before flattening."""
        h, p = np.asarray(X, dtype=np.float64), 0
        for spec in self.layers:
            if spec.kind == "flatten":
                return h
            if spec.kind == "conv3x3_valid":
                h = conv3x3_forward(h, *self.params[p])
                p += 1
            elif spec.kind == "relu":
                h = np.maximum(h, 0.0)
        return h

    def backward(self, cache, dy):
        if cache is None or len(cache) != len(self.layers):
            raise ValueError("backward needs the cache of a matching forward pass")
        dy = np.asarray(dy, dtype=np.float64)
        if dy.shape != (cache[0].shape[0],):
            raise ValueError("dL/dy_hat must have one entry per batch row")
        grads = [None] * len(self.params)
        g, p = dy[:, None], len(self.params)
        for spec, x in zip(reversed(self.layers), reversed(cache)):
            if spec.kind == "conv3x3_valid":
                p -= 1
                g, dW, db = conv3x3_backward(x, self.params[p][0], g)
                grads[p] = (dW, db)
            elif spec.kind == "relu":
                g = g * (x > 0)
            elif spec.kind == "flatten":
                g = g.reshape(x.shape)
            else:
                p -= 1
                W = self.params[p][0]
                grads[p] = (x.T @ g, g.sum(axis=0))
                g = g @ W.T
        return grads

    def predict(self, X, batch_size=512):
        X = np.asarray(X)
        out = [self.forward(X[s:s + batch_size], keep_cache=False)[0]
               for s in range(0, len(X), batch_size)]
        return np.concatenate(out) if out else np.zeros(0)


# --------------------------------------------------------------------------
# Loss and optimizer
# --------------------------------------------------------------------------


def wrmse_weights(target, gamma):
    """Per-sample weight ``(-ln target) ** -gamma``; grows as the target approaches 1."""
    target = np.asarray(target, dtype=np.float64)
    return np.power(-np.log(target), -gamma)


def wrmse_loss(y_hat, target, gamma=0.95, n_total=None):
    """Weighted residue MSE and its gradient with respect to ``y_hat``.

    ``n_total`` sets the normalizer when the batch is evaluated in chunks.
    """
    y_hat = np.asarray(y_hat, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if np.any(target <= 0) or np.any(target >= 1):
        raise AssertionError("mapped targets must lie strictly inside (0, 1)")
    n = len(y_hat) if n_total is None else n_total
    w = np.ones_like(target) if gamma == 0 else wrmse_weights(target, gamma)
    diff = y_hat - target
    return float(np.sum(diff * diff * w) / n), 2.0 * diff * w / n


def mse_loss(y_hat, target, n_total=None):
    return wrmse_loss(y_hat, target, 0.0, n_total)


LOSSES = ("wrmse", "mse")


def rmsprop_step(theta, grad, acc, lr=1e-4, rho=0.9, eps=1e-8):
    """One RMSProp update; returns the new ``(theta, acc)``."""
    theta, grad, acc = np.asarray(theta), np.asarray(grad), np.asarray(acc)
    if not (theta.shape == grad.shape == acc.shape):
        raise ValueError("parameter, gradient and accumulator shapes differ")
    acc = rho * acc + (1.0 - rho) * grad * grad
    return theta - lr * grad / (np.sqrt(acc) + eps), acc


class RMSProp:
    def __init__(self, params, lr=1e-4, rho=0.9, eps=1e-8):
        self.lr, self.rho, self.eps = lr, rho, eps
        self.acc = [(np.zeros_like(W), np.zeros_like(b)) for W, b in params]

    def step(self, params, grads):
        out = []
        for k, ((W, b), (gW, gb)) in enumerate(zip(params, grads)):
            W, aW = rmsprop_step(W, gW, self.acc[k][0], self.lr, self.rho, self.eps)
            b, ab = rmsprop_step(b, gb, self.acc[k][1], self.lr, self.rho, self.eps)
            self.acc[k] = (aW, ab)
            out.append((W, b))
        return out


# --------------------------------------------------------------------------
# Residue mapping
# --------------------------------------------------------------------------


def map_residue(eps, delta=1e-4):
    """Residue in [-1, 1] -> regression target in [delta, 1 - delta]."""
    return np.clip((np.asarray(eps, dtype=np.float64) + 1.0) / 2.0, delta, 1.0 - delta)


def predict_residue(y_hat):
    """Network output -> residue correction in [-1, 1]."""
    return np.clip(2.0 * np.asarray(y_hat, dtype=np.float64) - 1.0, -1.0, 1.0)


def apply_correction(p_roi, eps_hat):
    return np.clip(np.asarray(p_roi, dtype=np.float64) + eps_hat, 0.0, 1.0)


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------


def save_net(path, net: RadHopNet, extra=None) -> None:
    path = Path(path)
    sidecar = path.with_name(path.name + ".bin")
    chunks, index, offset = [], [], 0
    for W, b in net.params:
        entry = {}
        for name, arr in (("W", W), ("b", b)):
            data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            entry[name] = {"offset": offset, "shape": list(arr.shape)}
            chunks.append(data)
            offset += len(data)
        index.append(entry)
    desc = {
        "version": NET_VERSION, "in_shape": list(net.in_shape), "seed": net.seed,
        "layers": [{"kind": s.kind, "n_in": s.n_in, "n_out": s.n_out} for s in net.layers],
        "n_params": net.n_params, "weights": sidecar.name, "index": index,
    }
    if extra:
        desc["extra"] = extra
    sidecar.write_bytes(b"".join(chunks))
    path.write_text(json.dumps(desc, indent=1) + "\n")


def load_net(path) -> RadHopNet:
    path = Path(path)
    desc = json.loads(path.read_text())
    if desc.get("version") != NET_VERSION:
        raise ValueError(f"{path}: unsupported network version {desc.get('version')!r}")
    raw = (path.parent / desc["weights"]).read_bytes()
    net = RadHopNet.__new__(RadHopNet)
    net.in_shape = tuple(desc["in_shape"])
    net.seed = desc["seed"]
    net.layers = [LayerSpec(**d) for d in desc["layers"]]

    def read(spec):
        count = int(np.prod(spec["shape"]))
        arr = np.frombuffer(raw, "<f4", count=count, offset=spec["offset"])
        return arr.astype(np.float64).reshape(spec["shape"])

    net.params = [(read(e["W"]), read(e["b"])) for e in desc["index"]]
    return net
