"""Independent reference computations shared by the test modules.

Nothing here uses the package's reverse pass: gradients come from central
finite differences on plain numpy functions, losses from scalar loops.
"""

from __future__ import annotations

import math

import numpy as np


def central_diff(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    g = np.empty(x.size)
    flat = x.reshape(-1)
    for i in range(flat.size):
        xp, xm = flat.copy(), flat.copy()
        xp[i] += eps
        xm[i] -= eps
        g[i] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2 * eps)
    return g.reshape(x.shape)


def rel_error(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-8))


def scalar_cross_entropy(logits, label: int) -> float:
    m = max(logits)
    z = sum(math.exp(v - m) for v in logits)
    return -(logits[label] - m - math.log(z))


def forward_np(x, layers, final_linear=True):
    """Plain numpy MLP: ``layers`` is a list of ``(weight, bias)``."""
    h = x
    for i, (wt, b) in enumerate(layers):
        h = h @ wt + b
        if not (final_linear and i == len(layers) - 1):
            h = np.maximum(h, 0.0)
    return h


def unrolled_linear_meta_loss(theta_flat, w0, xs, ys, x_meta, y_meta, alpha):
    """Meta-loss of a linear RLN ``x @ theta`` and linear PLN after SGD steps on each (x, y) pair.

    All gradients written out by hand: with ``h = x theta`` and squared error
    ``mean((h w - y)^2)`` the PLN gradient is ``2 h^T (h w - y) / n``.
    """
    d_in, d = xs[0].shape[1], w0.shape[0]
    theta = theta_flat.reshape(d_in, d)
    w = w0.copy()
    for x, y in zip(xs, ys):
        h = x @ theta
        r = h @ w - y
        w = w - alpha * 2.0 * h.T @ r / r.size
    r = x_meta @ theta @ w - y_meta
    return float(np.mean(r * r))
