"""Finite-difference verification of the regressor's analytic gradients."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List

import numpy as np

from .net import RadHopNet, conv3x3_forward, wrmse_loss


@dataclass
class GradcheckReport:
    trials: int
    gamma: float
    step: float
    tolerance: float
    max_rel_error: float
    n_checked: int
    n_frozen: int
    per_trial: List[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def to_dict(self):
        return {**asdict(self), "passed": self.passed}


def _forward(net, X, masks=None):
    """Forward pass returning ``(y_hat, relu_patterns)``; ``masks`` freezes every ReLU."""
    h, p, patterns = np.asarray(X, dtype=np.float64), 0, []
    for spec in net.layers:
        if spec.kind == "conv3x3_valid":
            h = conv3x3_forward(h, *net.params[p])
            p += 1
        elif spec.kind == "relu":
            m = h > 0 if masks is None else masks[len(patterns)]
            patterns.append(m)
            h = h * m
        elif spec.kind == "flatten":
            h = h.reshape(h.shape[0], -1)
        else:
            W, b = net.params[p]
            h = h @ W + b
            p += 1
    return h[:, 0], patterns


def rel_error(analytic, numeric):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def check_net(net, X, target, gamma=0.95, step=1e-3, per_tensor=8, rng=None):
    """Compare analytic and central-difference gradients at sampled coordinates.

    Every weight and bias tensor contributes ``per_tensor`` coordinates.  When
    a +-step perturbation flips a ReLU the loss has a kink inside the stencil;
    the difference is then taken with every ReLU frozen at its unperturbed
    on/off state, i.e. on the linear region the backward pass differentiates.
    Returns ``(max_rel_error, n_checked, n_frozen)``.
    """
    rng = np.random.default_rng(rng)
    y_hat, cache = net.forward(X)
    _, dy = wrmse_loss(y_hat, target, gamma)
    grads = net.backward(cache, dy)
    base = _forward(net, X)[1]

    def loss(masks=None):
        out, pattern = _forward(net, X, masks)
        return wrmse_loss(out, target, gamma)[0], pattern

    worst, checked, frozen = 0.0, 0, 0
    for k in range(len(net.params)):
        for slot in (0, 1):
            flat, gflat = net.params[k][slot].reshape(-1), grads[k][slot].reshape(-1)
            for i in rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False):
                old = flat[i]
                flat[i] = old + step
                plus, p_plus = loss()
                flat[i] = old - step
                minus, p_minus = loss()
                if any((a != b).any() for a, b in zip(base + base, p_plus + p_minus)):
                    minus = loss(base)[0]
                    flat[i] = old + step
                    plus = loss(base)[0]
                    frozen += 1
                flat[i] = old
                worst = max(worst, rel_error(gflat[i], (plus - minus) / (2 * step)))
                checked += 1
    return worst, checked, frozen


def run_gradcheck(trials=30, seed=0, gamma=0.95, step=1e-3, tolerance=1e-4, max_batch=8,
                  per_tensor=8, layers=None) -> GradcheckReport:
    """Seeded trials over freshly initialized nets and random batches of 1..``max_batch`` rows."""
    rng = np.random.default_rng(seed)
    per_trial, checked, frozen = [], 0, 0
    for t in range(trials):
        net = RadHopNet(layers, seed=int(rng.integers(2 ** 31)))
        b = int(rng.integers(1, max_batch + 1))
        X = rng.normal(size=(b,) + net.in_shape)
        target = rng.uniform(1e-4, 1 - 1e-4, size=b)
        worst, n, f = check_net(net, X, target, gamma, step, per_tensor, rng)
        per_trial.append(float(worst))
        checked += n
        frozen += f
    return GradcheckReport(trials, gamma, step, tolerance, float(max(per_trial, default=0.0)),
                           checked, frozen, per_trial)
