"""Layer primitives with hand-written forward and backward passes.

Every array is a float64 numpy array.  Convolution and pooling accept either a
single chip ``(C, H, W)`` or a batch ``(N, C, H, W)``; the output keeps the
same rank as the input.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

SAME = "same"
VALID = "valid"
LOG_CLAMP = 1e-12


class ShapeError(ValueError):
    """Raised when array shapes are incompatible with an operation."""


@dataclass
class LayerGrads:
    d_input: np.ndarray
    d_params: list[np.ndarray] = field(default_factory=list)


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected a (C,H,W) or (N,C,H,W) array, got shape {x.shape}")


def _check_padding(padding: str) -> None:
    if padding not in (SAME, VALID):
        raise ValueError(f"padding must be {SAME!r} or {VALID!r}, got {padding!r}")


def _im2col(xp: np.ndarray, h: int, w: int) -> np.ndarray:
    """Columns of 3x3 patches: (C*9, N*h*w) from a padded (N, C, h+2, w+2) array."""
    n, c = xp.shape[:2]
    cols = np.empty((c, 3, 3, n, h, w))
    for u in range(3):
        for v in range(3):
            cols[:, u, v] = xp[:, :, u:u + h, v:v + w].transpose(1, 0, 2, 3)
    return cols.reshape(c * 9, n * h * w)


def _correlate(xp: np.ndarray, kernels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n, _, hp, wp = xp.shape
    h, w = hp - 2, wp - 2
    o = kernels.shape[0]
    cols = _im2col(xp, h, w)
    out = (kernels.reshape(o, -1) @ cols).reshape(o, n, h, w).transpose(1, 0, 2, 3)
    return out, cols


def conv2d_forward_cols(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray,
                        padding: str) -> tuple[np.ndarray, np.ndarray]:
    """Batched forward pass returning the output and the patch columns for backward."""
    _check_padding(padding)
    if x.ndim != 4:
        raise ShapeError(f"expected a (N,C,H,W) batch, got shape {x.shape}")
    if kernels.ndim != 4 or kernels.shape[2:] != (3, 3):
        raise ShapeError(f"kernels must have shape (C_out, C_in, 3, 3), got {kernels.shape}")
    if kernels.shape[1] != x.shape[1]:
        raise ShapeError(
            f"input has {x.shape[1]} channels but kernels expect C_in={kernels.shape[1]}")
    if bias.shape != (kernels.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} does not match C_out={kernels.shape[0]}")
    if padding == SAME:
        x = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    elif x.shape[2] < 3 or x.shape[3] < 3:
        raise ShapeError(f"valid convolution needs H, W >= 3, got {x.shape[2:]}")
    out, cols = _correlate(x, kernels)
    return out + bias[None, :, None, None], cols


def conv2d_forward(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray,
                   padding: str = SAME) -> np.ndarray:
    """3x3 cross-correlation, stride 1, with ``same`` (zero pad 1) or ``valid`` padding."""
    xb, single = _as_batch(x)
    out, _ = conv2d_forward_cols(xb, kernels, bias, padding)
    return out[0] if single else out


def conv2d_backward(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray, padding: str,
                    d_output: np.ndarray, cols: np.ndarray | None = None) -> LayerGrads:
    """Gradients of :func:`conv2d_forward` w.r.t. input, kernels and bias.

    ``cols`` may carry the patch matrix saved by the forward pass.
    """
    _check_padding(padding)
    xb, single = _as_batch(x)
    db_out, _ = _as_batch(d_output)
    n, c, h, w = xb.shape
    o = kernels.shape[0]
    ho, wo = (h, w) if padding == SAME else (h - 2, w - 2)
    expected = (n, o, ho, wo)
    if db_out.shape != expected:
        raise ShapeError(f"d_output shape {db_out.shape} != forward output shape {expected}")
    if cols is None:
        xp = np.pad(xb, ((0, 0), (0, 0), (1, 1), (1, 1))) if padding == SAME else xb
        cols = _im2col(xp, ho, wo)

    dy = db_out.transpose(1, 0, 2, 3).reshape(o, -1)
    d_kernels = (dy @ cols.T).reshape(kernels.shape)
    d_bias = dy.sum(axis=1)

    # input gradient is a full correlation of d_output with the flipped, transposed kernels
    flipped = np.ascontiguousarray(kernels[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    pad = 1 if padding == SAME else 2
    d_in, _ = _correlate(np.pad(db_out, ((0, 0), (0, 0), (pad, pad), (pad, pad))), flipped)
    return LayerGrads(d_in[0] if single else d_in, [d_kernels, d_bias])


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, d_output: np.ndarray) -> LayerGrads:
    if x.shape != d_output.shape:
        raise ShapeError(f"relu: input {x.shape} vs d_output {d_output.shape}")
    return LayerGrads(np.where(x > 0, d_output, 0.0))


@dataclass
class PoolCache:
    """Argmax position (0..3, row-major within each 2x2 window) plus the input shape."""
    argmax: np.ndarray
    input_shape: tuple[int, ...]


def _windows2x2(xb: np.ndarray) -> np.ndarray:
    n, c, h, w = xb.shape
    ho, wo = h // 2, w // 2
    v = xb[:, :, :2 * ho, :2 * wo].reshape(n, c, ho, 2, wo, 2)
    return v.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)


def maxpool2x2_forward(x: np.ndarray) -> tuple[np.ndarray, PoolCache]:
    """Disjoint 2x2 max pooling; odd trailing rows/columns are dropped."""
    xb, single = _as_batch(x)
    if xb.shape[2] < 2 or xb.shape[3] < 2:
        raise ShapeError(f"max pooling needs H, W >= 2, got {xb.shape[2:]}")
    win = _windows2x2(xb)
    idx = np.argmax(win, axis=-1)  # first maximum wins ties
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return (out[0] if single else out), PoolCache(idx, x.shape)


def maxpool2x2_backward(cache: PoolCache, d_output: np.ndarray) -> LayerGrads:
    idx = cache.argmax
    db_out, single = _as_batch(d_output)
    if db_out.shape != idx.shape:
        raise ShapeError(f"d_output shape {db_out.shape} != pooled shape {idx.shape}")
    n, c, ho, wo = idx.shape
    onehot = np.zeros((n, c, ho, wo, 4))
    np.put_along_axis(onehot, idx[..., None], db_out[..., None], axis=-1)
    spread = onehot.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    full_shape = cache.input_shape if len(cache.input_shape) == 4 else (1, *cache.input_shape)
    d_in = np.zeros(full_shape)
    d_in[:, :, :2 * ho, :2 * wo] = spread.reshape(n, c, 2 * ho, 2 * wo)
    return LayerGrads(d_in[0] if single else d_in)


def linear_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """``weight @ x + bias`` for a vector ``x`` of length n, or row-wise for an (N, n) batch."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise ShapeError(
            f"linear: input {x.shape}, weight {weight.shape}, bias {bias.shape} disagree")
    return x @ weight.T + bias


def linear_backward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray,
                    d_output: np.ndarray) -> LayerGrads:
    if d_output.shape != x.shape[:-1] + (weight.shape[0],):
        raise ShapeError(f"linear: d_output {d_output.shape} mismatches output shape")
    xb = np.atleast_2d(x)
    db = np.atleast_2d(d_output)
    return LayerGrads(d_output @ weight, [db.T @ xb, db.sum(axis=0)])


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(y_hat: np.ndarray, y: np.ndarray) -> float | np.ndarray:
    """-sum(y_hat * log(y)) over the last axis, with ``y`` clamped at 1e-12."""
    if y_hat.shape != y.shape:
        raise ShapeError(f"cross_entropy: target {y_hat.shape} vs prediction {y.shape}")
    h = -(y_hat * np.log(np.maximum(y, LOG_CLAMP))).sum(axis=-1)
    return float(h) if np.ndim(h) == 0 else h


def softmax_cross_entropy_backward(y_hat: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Gradient of ``cross_entropy(y_hat, softmax(z))`` w.r.t. the logits ``z``.

    Classes whose probability sits below the log clamp contribute nothing, which
    keeps the gradient exact for the clamped loss.
    """
    w = y_hat * (probs >= LOG_CLAMP)
    return probs * w.sum(axis=-1, keepdims=True) - w


def mse_frobenius(x_bar: np.ndarray, x: np.ndarray) -> float:
    """``(1/2N) * ||x_bar - x||_F^2`` over a batch whose first axis is N."""
    x_bar = np.asarray(x_bar, dtype=float)
    x = np.asarray(x, dtype=float)
    if x_bar.shape != x.shape:
        raise ShapeError(f"mse_frobenius: {x_bar.shape} vs {x.shape}")
    if x.ndim == 0 or x.shape[0] == 0:
        raise ValueError("mse_frobenius needs a non-empty batch")
    d = x_bar - x
    return float(np.sum(d * d) / (2 * x.shape[0]))


def mse_frobenius_backward(x_bar: np.ndarray, x: np.ndarray) -> np.ndarray:
    return (x_bar - x) / x.shape[0]


def numerical_gradient(fun: Callable[[np.ndarray], float], x: np.ndarray,
                       step: float = 1e-4, coords: np.ndarray | None = None) -> np.ndarray:
    """Central differences of scalar ``fun`` at ``x``; only ``coords`` (flat indices) if given."""
    x = np.array(x, dtype=float)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in (range(flat.size) if coords is None else coords):
        orig = flat[i]
        flat[i] = orig + step
        fp = fun(x)
        flat[i] = orig - step
        fm = fun(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Worst coordinate-wise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=float).ravel()
    n = np.asarray(numeric, dtype=float).ravel()
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def grad_check(fun: Callable[[np.ndarray], float], analytic: np.ndarray, x: np.ndarray,
               step: float = 1e-4, coords: np.ndarray | None = None) -> float:
    """Max relative error between ``analytic`` and central differences of ``fun`` at ``x``."""
    numeric = numerical_gradient(fun, x, step, coords)
    if coords is None:
        return relative_error(analytic, numeric)
    a = np.asarray(analytic).reshape(-1)[coords]
    return relative_error(a, numeric.reshape(-1)[coords])
