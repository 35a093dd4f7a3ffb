"""Slow, obviously-correct reference implementations used only by the tests."""
from itertools import combinations

import numpy as np


def direct_conv2d(x, kernels, bias, padding):
    """Explicit loops over output channel, position and kernel taps."""
    c_in, h, w = x.shape
    o = kernels.shape[0]
    if padding == "same":
        xp = np.zeros((c_in, h + 2, w + 2))
        xp[:, 1:-1, 1:-1] = x
        ho, wo = h, w
    else:
        xp = x
        ho, wo = h - 2, w - 2
    out = np.zeros((o, ho, wo))
    for q in range(o):
        for i in range(ho):
            for j in range(wo):
                s = bias[q]
                for p in range(c_in):
                    for u in range(3):
                        for v in range(3):
                            s += kernels[q, p, u, v] * xp[p, i + u, j + v]
                out[q, i, j] = s
    return out


def direct_maxpool(x):
    c, h, w = x.shape
    out = np.zeros((c, h // 2, w // 2))
    for p in range(c):
        for i in range(h // 2):
            for j in range(w // 2):
                out[p, i, j] = max(x[p, 2 * i + a, 2 * j + b] for a in (0, 1) for b in (0, 1))
    return out


def best_subset(atoms, signal, max_size):
    """Exhaustive least squares over all supports of size <= max_size.

    ``atoms`` is a list of per-channel (d, K) matrices, ``signal`` is (c, d).
    Returns (support, residual norm) of the best support of the smallest size
    reaching a near-zero residual, or of size ``max_size`` otherwise.
    """
    k = atoms[0].shape[1]
    best = None
    for s in range(1, max_size + 1):
        for sup in combinations(range(k), s):
            r2 = 0.0
            for a, y in zip(atoms, signal):
                sub = a[:, sup]
                coef = np.linalg.lstsq(sub, y, rcond=None)[0]
                r2 += float(np.sum((y - sub @ coef) ** 2))
            if best is None or r2 < best[1] - 1e-12:
                best = (sup, r2)
        if best[1] <= 1e-20 * max(1.0, float(np.sum(signal ** 2))):
            break
    return list(best[0]), np.sqrt(best[1])
