"""Finite-difference checks for every layer and for the end-to-end joint loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers as L
from .model import (NetworkConfig, classification_layers, decomposition_layers, init_params,
                    loss_and_grads, _forward_stack)

LAYER_THRESHOLD = 1e-4
END_TO_END_THRESHOLD = 1e-3
STEP = 1e-4
LAYERS = ("conv2d_same", "conv2d_valid", "relu", "maxpool", "linear", "softmax_ce", "mse",
          "end_to_end")


@dataclass
class CheckResult:
    name: str
    max_error: float
    threshold: float
    cases: int

    @property
    def passed(self) -> bool:
        return self.max_error < self.threshold

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name:<13} max rel err {self.max_error:.3e} "
                f"(threshold {self.threshold:.0e}, {self.cases} cases)")


def _probe(rng, shape):
    return rng.standard_normal(shape)


def _check_conv(rng, padding):
    c_in, c_out = rng.integers(1, 4, size=2)
    h, w = rng.integers(3, 7, size=2)
    x = rng.standard_normal((c_in, h, w))
    k = rng.standard_normal((c_out, c_in, 3, 3))
    b = rng.standard_normal(c_out)
    r = _probe(rng, L.conv2d_forward(x, k, b, padding).shape)
    g = L.conv2d_backward(x, k, b, padding, r)
    errs = [L.grad_check(lambda v: np.sum(L.conv2d_forward(v, k, b, padding) * r),
                         g.d_input, x, STEP),
            L.grad_check(lambda v: np.sum(L.conv2d_forward(x, v, b, padding) * r),
                         g.d_params[0], k, STEP),
            L.grad_check(lambda v: np.sum(L.conv2d_forward(x, k, v, padding) * r),
                         g.d_params[1], b, STEP)]
    return max(errs)


def _check_relu(rng):
    z = rng.standard_normal((2, 4, 4))
    x = np.sign(z) * (np.abs(z) + 0.01)  # keep every entry away from the kink
    r = _probe(rng, x.shape)
    g = L.relu_backward(x, r)
    return L.grad_check(lambda v: np.sum(L.relu_forward(v) * r), g.d_input, x, STEP)


def _check_pool(rng):
    c, h, w = 2, int(rng.integers(2, 7)), int(rng.integers(2, 7))
    # distinct values with gaps far larger than the step, so no argmax switches
    x = (rng.permutation(c * h * w).reshape(c, h, w) * 0.01
         + rng.uniform(0, 1e-3, (c, h, w)))
    out, cache = L.maxpool2x2_forward(x)
    r = _probe(rng, out.shape)
    g = L.maxpool2x2_backward(cache, r)
    return L.grad_check(lambda v: np.sum(L.maxpool2x2_forward(v)[0] * r), g.d_input, x, STEP)


def _check_linear(rng):
    n, m = rng.integers(1, 7, size=2)
    x = rng.standard_normal(n)
    wgt = rng.standard_normal((m, n))
    b = rng.standard_normal(m)
    r = _probe(rng, m)
    g = L.linear_backward(x, wgt, b, r)
    return max(
        L.grad_check(lambda v: np.sum(L.linear_forward(v, wgt, b) * r), g.d_input, x, STEP),
        L.grad_check(lambda v: np.sum(L.linear_forward(x, v, b) * r), g.d_params[0], wgt, STEP),
        L.grad_check(lambda v: np.sum(L.linear_forward(x, wgt, v) * r), g.d_params[1], b, STEP))


def _check_softmax_ce(rng):
    c = int(rng.integers(2, 6))
    z = rng.standard_normal(c) * 2
    y_hat = np.eye(c)[rng.integers(c)]
    d = L.softmax_cross_entropy_backward(y_hat, L.softmax(z))
    return L.grad_check(lambda v: L.cross_entropy(y_hat, L.softmax(v)), d, z, STEP)


def _check_mse(rng):
    shape = (int(rng.integers(1, 4)), 2, 3, 3)
    xb, x = rng.standard_normal(shape), rng.standard_normal(shape)
    return L.grad_check(lambda v: L.mse_frobenius(v, x), L.mse_frobenius_backward(xb, x), xb,
                        STEP)


def activation_signature(params, x_tilde) -> bytes:
    """ReLU on/off pattern and pooling argmax of a forward pass, as bytes."""
    cfg = params.config
    x_bar, dec_cache = _forward_stack(decomposition_layers(cfg), params.theta1, x_tilde)
    _, cls_cache = _forward_stack(classification_layers(cfg), params.theta2, x_bar)
    parts = []
    for specs, caches in ((decomposition_layers(cfg), dec_cache),
                          (classification_layers(cfg), cls_cache)):
        for spec, cache in zip(specs, caches):
            if spec.kind == "relu":
                parts.append(np.packbits(cache > 0).tobytes())
            elif spec.kind == "pool":
                parts.append(cache.argmax.astype(np.uint8).tobytes())
    return b"".join(parts)


def end_to_end_error(seed: int = 0, n_weights: int = 20, config: NetworkConfig | None = None,
                     step: float = STEP) -> float:
    """Joint-loss gradient vs. central differences on a random subset of weights.

    Coordinates whose +/- step perturbation flips any ReLU or pooling decision are
    skipped, so the finite difference never straddles a kink.
    """
    cfg = config or NetworkConfig(d1=2, d2=1, channels=2, chip_h=8, chip_w=8, filters=4,
                                  fc1=8, fc2=6)
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed)
    for _, v in params.items():  # nonzero biases exercise the bias gradients
        if v.ndim == 1:
            v[:] = rng.normal(scale=0.1, size=v.shape)
    shape = (3, cfg.channels, cfg.chip_h, cfg.chip_w)
    xt, x = rng.standard_normal(shape), rng.standard_normal(shape)
    y = np.eye(2)[rng.integers(0, 2, size=3)]
    _, grads, _ = loss_and_grads(params, xt, x, y)
    names = [k for k, _ in params.items()]
    base = activation_signature(params, xt)

    def perturbed(name, flat_idx, delta):
        vals = {k: v.copy() for k, v in params.items()}
        vals[name].reshape(-1)[flat_idx] += delta
        return params.with_values(vals)

    worst = 0.0
    accepted = 0
    sizes = np.array([params[k].size for k in names])
    for _ in range(50 * n_weights):
        if accepted == n_weights:
            break
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        i = int(rng.integers(params[name].size))
        plus, minus = perturbed(name, i, step), perturbed(name, i, -step)
        if (activation_signature(plus, xt) != base or activation_signature(minus, xt) != base):
            continue
        fp = loss_and_grads(plus, xt, x, y, need_grads=False)[0].total
        fm = loss_and_grads(minus, xt, x, y, need_grads=False)[0].total
        num = (fp - fm) / (2 * step)
        worst = max(worst, L.relative_error(grads[name].reshape(-1)[i], num))
        accepted += 1
    if accepted < n_weights:
        raise RuntimeError(f"only {accepted} kink-free coordinates found")
    return worst


_LAYER_CHECKS = {
    "conv2d_same": lambda rng: _check_conv(rng, L.SAME),
    "conv2d_valid": lambda rng: _check_conv(rng, L.VALID),
    "relu": _check_relu,
    "maxpool": _check_pool,
    "linear": _check_linear,
    "softmax_ce": _check_softmax_ce,
    "mse": _check_mse,
}


def run(layers=LAYERS, seed: int = 0, cases: int = 20) -> list[CheckResult]:
    """Run the requested suites; ``conv2d`` selects both padding modes."""
    wanted = []
    for name in layers:
        if name == "conv2d":
            wanted += ["conv2d_same", "conv2d_valid"]
        elif name in LAYERS:
            wanted.append(name)
        else:
            raise ValueError(f"unknown layer {name!r}; choose from {LAYERS + ('conv2d',)}")
    results = []
    for name in dict.fromkeys(wanted):
        if name == "end_to_end":
            err = end_to_end_error(seed)
            results.append(CheckResult(name, err, END_TO_END_THRESHOLD, 1))
            continue
        rng = np.random.default_rng([seed, LAYERS.index(name)])
        err = max(_LAYER_CHECKS[name](rng) for _ in range(cases))
        results.append(CheckResult(name, err, LAYER_THRESHOLD, cases))
    return results
