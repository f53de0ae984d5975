"""Slow, obviously-correct reference implementations used as test oracles.

None of these share code with the package; they are written with explicit
loops so they can be checked by eye.
"""

from __future__ import annotations

import math

import numpy as np


def naive_conv(x, kernels, bias, padding="same"):
    """Direct cross-correlation of an H x W x C input, one output value at a time."""
    h, w, c = x.shape
    k, _, _, f = kernels.shape
    pad = k // 2 if padding == "same" else 0
    out_h, out_w = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    out = np.zeros((out_h, out_w, f))
    for i in range(out_h):
        for j in range(out_w):
            for o in range(f):
                acc = bias[o]
                for di in range(k):
                    for dj in range(k):
                        r, s = i + di - pad, j + dj - pad
                        if 0 <= r < h and 0 <= s < w:
                            for ch in range(c):
                                acc += x[r, s, ch] * kernels[di, dj, ch, o]
                out[i, j, o] = acc
    return out


def naive_pool(x):
    """2x2 stride-2 max by scanning each window; ties keep the first element."""
    h, w, c = x.shape
    out = np.zeros((h // 2, w // 2, c))
    arg = np.zeros((h // 2, w // 2, c), dtype=int)
    for i in range(h // 2):
        for j in range(w // 2):
            for ch in range(c):
                window = [x[2 * i, 2 * j, ch], x[2 * i, 2 * j + 1, ch],
                          x[2 * i + 1, 2 * j, ch], x[2 * i + 1, 2 * j + 1, ch]]
                best = 0
                for n in range(1, 4):
                    if window[n] > window[best]:
                        best = n
                out[i, j, ch] = window[best]
                arg[i, j, ch] = best
    return out, arg


def naive_relu(x):
    flat = [v if v > 0 else 0.0 for v in np.ravel(x)]
    return np.array(flat).reshape(np.shape(x))


def naive_dense(x, weights, bias):
    return np.array([sum(weights[o, i] * x[i] for i in range(len(x))) + bias[o]
                     for o in range(weights.shape[0])])


def brute_froc(probs, labels, scans):
    """Enumerate every distinct positive threshold and count calls directly."""
    probs = [float(p) for p in probs]
    labels = [int(v) for v in labels]
    n_pos = sum(labels)
    thresholds = sorted({p for p in probs if p > 0}, reverse=True)
    points = []
    for t in thresholds:
        tp = sum(1 for p, y in zip(probs, labels) if p >= t and y == 1)
        fp = sum(1 for p, y in zip(probs, labels) if p >= t and y == 0)
        pt = (fp / scans, tp / n_pos)
        if not points or points[-1] != pt:
            points.append(pt)
    return points or [(0.0, 0.0)]


def pwl_oracle(points, q):
    """Piecewise-linear read-off, scanning segments left to right.

    Vertical steps take the highest sensitivity at that FP rate; outside the
    covered range the nearest end point's value is returned.
    """
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    if q <= xs[0]:
        return max(y for x, y in points if x == xs[0]) if q == xs[0] else ys[0]
    if q >= xs[-1]:
        return max(y for x, y in points if x == xs[-1])
    exact = [y for x, y in points if x == q]
    if exact:
        return max(exact)
    for a in range(len(xs) - 1):
        if xs[a] < q < xs[a + 1]:
            t = (q - xs[a]) / (xs[a + 1] - xs[a])
            return ys[a] + t * (ys[a + 1] - ys[a])
    raise AssertionError("unreachable")


def two_pass_std(values):
    values = [float(v) for v in values]
    mean = sum(values) / len(values)
    return math.sqrt(sum((v - mean) ** 2 for v in values) / len(values))


def momentum_recurrence(p0, grads, lr, mu):
    """Scalar momentum SGD: v <- mu v - lr g, p <- p + v."""
    p, v = p0, 0.0
    for g in grads:
        v = mu * v - lr * g
        p = p + v
    return p


def count_bins(values, bins):
    """Counts per uniform bin on [0, 1] by direct comparison; 1.0 goes in the last bin."""
    counts = [0] * bins
    for v in values:
        for b in range(bins):
            lo, hi = b / bins, (b + 1) / bins
            if lo <= v < hi or (b == bins - 1 and v == 1.0):
                counts[b] += 1
                break
    return counts


def rel_error(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)


def gradient_check(network, loss_fn, x, n_per_layer, rng, eps=1e-5):
    """Largest relative error between backprop and central differences.

    ``loss_fn(logits) -> (loss, dloss/dlogits)``.  Samples ``n_per_layer``
    parameter entries from every layer that owns parameters.
    """
    logits = network.forward(x)
    _, g = loss_fn(logits)
    grads = network.backward(g)
    worst, checked = 0.0, []
    for layer, lgrad in zip(network.layers, grads.layers):
        if not layer.params:
            continue
        slots = [(name, idx) for name in sorted(layer.params) for idx in np.ndindex(layer.params[name].shape)]
        picks = rng.choice(len(slots), size=min(n_per_layer, len(slots)), replace=False)
        for s in picks:
            name, idx = slots[s]
            param = layer.params[name]
            orig = param[idx]
            param[idx] = orig + eps
            up = loss_fn(network.forward(x))[0]
            param[idx] = orig - eps
            down = loss_fn(network.forward(x))[0]
            param[idx] = orig
            numeric = (up - down) / (2 * eps)
            worst = max(worst, rel_error(lgrad[name][idx], numeric))
        checked.append(len(picks))
    network._taped = False
    return worst, checked
