"""Decomposition + classification network, joint loss and training loop."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from . import layers as L

log = logging.getLogger(__name__)

MODES = ("sdcn", "cnn_only", "two_step")


@dataclass(frozen=True)
class NetworkConfig:
    d1: int = 10
    d2: int = 3
    channels: int = 3
    chip_h: int = 32
    chip_w: int = 32
    filters: int = 64
    fc1: int = 512
    fc2: int = 128
    classes: int = 2
    gamma: float = 1.0

    def __post_init__(self):
        if self.d1 < 1 or self.d2 < 1:
            raise ValueError(f"d1 and d2 must be >= 1 (got d1={self.d1}, d2={self.d2})")
        if self.classes != 2:
            raise ValueError("the target/confuser problem has exactly 2 classes")
        if not 1 <= self.channels <= 3:
            raise ValueError(f"channels must be 1, 2 or 3, got {self.channels}")
        if min(self.filters, self.fc1, self.fc2) < 1:
            raise ValueError("layer widths must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        self.feature_hw()  # raises if the chip is too small for d2 blocks

    def feature_hw(self) -> tuple[int, int]:
        """Spatial size after d2 rounds of (valid conv, 2x2 pool)."""
        h, w = self.chip_h, self.chip_w
        for _ in range(self.d2):
            h, w = h - 2, w - 2
            if h < 2 or w < 2:
                raise ValueError(
                    f"chip {self.chip_h}x{self.chip_w} does not survive {self.d2} conv/pool blocks")
            h, w = h // 2, w // 2
        if h < 1 or w < 1:
            raise ValueError(f"chip {self.chip_h}x{self.chip_w} too small for d2={self.d2}")
        return h, w

    @property
    def flatten_length(self) -> int:
        h, w = self.feature_hw()
        return self.filters * h * w


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | relu | pool | flatten | linear | softmax
    name: str = ""
    padding: str = ""
    n_in: int = 0
    n_out: int = 0


def decomposition_layers(cfg: NetworkConfig) -> list[LayerSpec]:
    out = []
    n_in = cfg.channels
    for i in range(cfg.d1):
        out += [LayerSpec("conv", f"dec{i}", L.SAME, n_in, cfg.filters), LayerSpec("relu")]
        n_in = cfg.filters
    # clean chips may be negative: no ReLU on the reconstruction layer
    out.append(LayerSpec("conv", f"dec{cfg.d1}", L.SAME, n_in, cfg.channels))
    return out


def classification_layers(cfg: NetworkConfig) -> list[LayerSpec]:
    out = []
    n_in = cfg.channels
    for i in range(cfg.d2):
        out += [LayerSpec("conv", f"cls{i}", L.VALID, n_in, cfg.filters), LayerSpec("relu"),
                LayerSpec("pool")]
        n_in = cfg.filters
    out += [LayerSpec("flatten"),
            LayerSpec("linear", "fc1", n_in=cfg.flatten_length, n_out=cfg.fc1), LayerSpec("relu"),
            LayerSpec("linear", "fc2", n_in=cfg.fc1, n_out=cfg.fc2), LayerSpec("relu"),
            LayerSpec("linear", "out", n_in=cfg.fc2, n_out=cfg.classes), LayerSpec("softmax")]
    return out


def describe_architecture(cfg: NetworkConfig) -> list[str]:
    """Human-readable layer list, e.g. ``conv same 3->64`` or ``linear 256->512``."""
    rows = []
    for spec in decomposition_layers(cfg) + classification_layers(cfg):
        if spec.kind == "conv":
            rows.append(f"conv {spec.padding} {spec.n_in}->{spec.n_out}")
        elif spec.kind == "linear":
            rows.append(f"linear {spec.n_in}->{spec.n_out}")
        elif spec.kind == "pool":
            rows.append("maxpool 2x2")
        else:
            rows.append(spec.kind)
    return rows


@dataclass
class NetworkParams:
    config: NetworkConfig
    theta1: dict[str, np.ndarray]
    theta2: dict[str, np.ndarray]

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        yield from self.theta1.items()
        yield from self.theta2.items()

    def __getitem__(self, name: str) -> np.ndarray:
        return self.theta1[name] if name in self.theta1 else self.theta2[name]

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.config, {k: v.copy() for k, v in self.theta1.items()},
                             {k: v.copy() for k, v in self.theta2.items()})

    def with_values(self, values: dict[str, np.ndarray]) -> "NetworkParams":
        return NetworkParams(self.config, {k: values[k] for k in self.theta1},
                             {k: values[k] for k in self.theta2})

    @property
    def n_weights(self) -> int:
        return sum(v.size for _, v in self.items())


RECONSTRUCTION_INIT_GAIN = 0.1


def init_params(cfg: NetworkConfig, seed: int = 0) -> NetworkParams:
    """Fan-in scaled uniform weights, zero biases.

    Layers followed by a ReLU use the He bound ``sqrt(6 / fan_in)``, the others
    ``sqrt(3 / fan_in)``.  The reconstruction conv is further scaled by
    ``RECONSTRUCTION_INIT_GAIN`` so the initial latent chip is close to zero;
    with a full-scale start the reconstruction error of heavily mixed inputs
    drives the decomposition ReLUs dead within the first epoch.
    """
    rng = np.random.default_rng(seed)
    last_dec = f"dec{cfg.d1}"

    def build(specs: list[LayerSpec]) -> dict[str, np.ndarray]:
        theta = {}
        for i, spec in enumerate(specs):
            if spec.kind not in ("conv", "linear"):
                continue
            followed_by_relu = i + 1 < len(specs) and specs[i + 1].kind == "relu"
            if spec.kind == "conv":
                shape = (spec.n_out, spec.n_in, 3, 3)
                fan_in = spec.n_in * 9
            else:
                shape = (spec.n_out, spec.n_in)
                fan_in = spec.n_in
            bound = np.sqrt((6.0 if followed_by_relu else 3.0) / fan_in)
            if spec.name == last_dec:
                bound *= RECONSTRUCTION_INIT_GAIN
            theta[f"{spec.name}.w"] = rng.uniform(-bound, bound, size=shape)
            theta[f"{spec.name}.b"] = np.zeros(spec.n_out)
        return theta

    return NetworkParams(cfg, build(decomposition_layers(cfg)), build(classification_layers(cfg)))


def _forward_stack(specs, theta, h):
    caches = []
    for spec in specs:
        if spec.kind == "conv":
            out, cols = L.conv2d_forward_cols(h, theta[f"{spec.name}.w"],
                                              theta[f"{spec.name}.b"], spec.padding)
            caches.append((h, cols))
            h = out
        elif spec.kind == "relu":
            caches.append(h)
            h = L.relu_forward(h)
        elif spec.kind == "pool":
            h, pc = L.maxpool2x2_forward(h)
            caches.append(pc)
        elif spec.kind == "flatten":
            caches.append(h.shape)
            h = h.reshape(h.shape[0], -1)
        elif spec.kind == "linear":
            caches.append(h)
            h = L.linear_forward(h, theta[f"{spec.name}.w"], theta[f"{spec.name}.b"])
        elif spec.kind == "softmax":
            caches.append(None)  # logits are returned; softmax applied by the caller
        else:
            raise ValueError(spec.kind)
    return h, caches


def _backward_stack(specs, theta, caches, d, grads):
    for spec, cache in zip(reversed(specs), reversed(caches)):
        if spec.kind == "conv":
            g = L.conv2d_backward(cache[0], theta[f"{spec.name}.w"], theta[f"{spec.name}.b"],
                                  spec.padding, d, cols=cache[1])
            grads[f"{spec.name}.w"], grads[f"{spec.name}.b"] = g.d_params
            d = g.d_input
        elif spec.kind == "relu":
            d = L.relu_backward(cache, d).d_input
        elif spec.kind == "pool":
            d = L.maxpool2x2_backward(cache, d).d_input
        elif spec.kind == "flatten":
            d = d.reshape(cache)
        elif spec.kind == "linear":
            g = L.linear_backward(cache, theta[f"{spec.name}.w"], theta[f"{spec.name}.b"], d)
            grads[f"{spec.name}.w"], grads[f"{spec.name}.b"] = g.d_params
            d = g.d_input
    return d


def _check_input(cfg: NetworkConfig, x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 3
    xb = x[None] if single else x
    want = (cfg.channels, cfg.chip_h, cfg.chip_w)
    if xb.ndim != 4 or xb.shape[1:] != want:
        raise L.ShapeError(f"expected chips of shape {want}, got {x.shape}")
    return xb, single


def decompose(params: NetworkParams, x_tilde: np.ndarray) -> np.ndarray:
    """Latent clean chip(s) from noisy input; same shape as the input."""
    xb, single = _check_input(params.config, x_tilde)
    out, _ = _forward_stack(decomposition_layers(params.config), params.theta1, xb)
    return out[0] if single else out


def classify(params: NetworkParams, x_bar: np.ndarray) -> np.ndarray:
    """Class probabilities ``[p_target, p_confuser]`` for each chip."""
    xb, single = _check_input(params.config, x_bar)
    logits, _ = _forward_stack(classification_layers(params.config), params.theta2, xb)
    p = L.softmax(logits)
    return p[0] if single else p


def predict_proba(params: NetworkParams, x_tilde: np.ndarray, batch_size: int = 256) -> np.ndarray:
    xb, single = _check_input(params.config, x_tilde)
    out = [classify(params, decompose(params, xb[i:i + batch_size]))
           for i in range(0, len(xb), batch_size)]
    p = np.concatenate(out) if out else np.zeros((0, 2))
    return p[0] if single else p


def predict_label(params: NetworkParams, x_tilde: np.ndarray) -> np.ndarray | int:
    """Argmax class (exact ties go to class 0, target)."""
    p = predict_proba(params, x_tilde)
    lab = np.argmax(p, axis=-1)
    return int(lab) if np.ndim(lab) == 0 else lab


@dataclass(frozen=True)
class LossRecord:
    total: float
    l1: float
    l2: float


def _weights(cfg: NetworkConfig, mode: str, gamma: float | None) -> tuple[float, float]:
    g = cfg.gamma if gamma is None else gamma
    if mode == "sdcn":
        return 1.0, g
    if mode == "cnn_only":
        return 0.0, g
    raise ValueError(f"unknown loss mode {mode!r}")


def loss_and_grads(params: NetworkParams, x_tilde: np.ndarray, x: np.ndarray, y_hat: np.ndarray,
                   w1: float = 1.0, w2: float | None = None, need_grads: bool = True,
                   ) -> tuple[LossRecord, dict[str, np.ndarray] | None, np.ndarray]:
    """Joint loss ``w1 * l1 + w2 * l2`` and its gradient w.r.t. every parameter.

    ``l1`` is reported as ``w1`` times the decomposition MSE, so a run with the
    decomposition term switched off logs zero there.  Also returns the class
    probabilities of the batch.
    """
    cfg = params.config
    w2 = cfg.gamma if w2 is None else w2
    xb, _ = _check_input(cfg, x_tilde)
    x = np.asarray(x, dtype=float).reshape(xb.shape)
    y_hat = np.asarray(y_hat, dtype=float).reshape(len(xb), cfg.classes)
    if len(xb) == 0:
        raise ValueError("loss needs a non-empty batch")

    dec, cls = decomposition_layers(cfg), classification_layers(cfg)
    x_bar, dec_cache = _forward_stack(dec, params.theta1, xb)
    logits, cls_cache = _forward_stack(cls, params.theta2, x_bar)
    probs = L.softmax(logits)
    l1 = w1 * L.mse_frobenius(x_bar, x) if w1 else 0.0
    l2 = float(np.mean(L.cross_entropy(y_hat, probs)))
    rec = LossRecord(l1 + w2 * l2, l1, l2)
    if not need_grads:
        return rec, None, probs

    grads: dict[str, np.ndarray] = {}
    d_logits = w2 * L.softmax_cross_entropy_backward(y_hat, probs) / len(xb)
    d_xbar = _backward_stack(cls, params.theta2, cls_cache, d_logits, grads)
    if w1:
        d_xbar = d_xbar + w1 * L.mse_frobenius_backward(x_bar, x)
    _backward_stack(dec, params.theta1, dec_cache, d_xbar, grads)
    return rec, grads, probs


def sdcn_loss(params: NetworkParams, x_tilde, x, y_hat, gamma: float | None = None) -> LossRecord:
    """``(1/2N)||X_bar - X||_F^2 + gamma * mean cross-entropy`` as (total, l1, l2)."""
    w1, w2 = _weights(params.config, "sdcn", gamma)
    return loss_and_grads(params, x_tilde, x, y_hat, w1, w2, need_grads=False)[0]


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"  # sgd | momentum | adam
    seed: int = 0
    gamma: float | None = None
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("sgd", "momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class Optimizer:
    """SGD, SGD with momentum, or Adam over a dict of named arrays."""

    def __init__(self, tc: TrainConfig):
        self.tc = tc
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, values: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             names=None) -> dict[str, np.ndarray]:
        tc = self.tc
        self.t += 1
        out = dict(values)
        for k in (grads if names is None else names):
            g = grads[k]
            if tc.optimizer == "sgd":
                out[k] = values[k] - tc.learning_rate * g
            elif tc.optimizer == "momentum":
                m = self.m.get(k, 0.0) * tc.momentum + g
                self.m[k] = m
                out[k] = values[k] - tc.learning_rate * m
            else:
                m = tc.beta1 * self.m.get(k, 0.0) + (1 - tc.beta1) * g
                v = tc.beta2 * self.v.get(k, 0.0) + (1 - tc.beta2) * g * g
                self.m[k], self.v[k] = m, v
                mh = m / (1 - tc.beta1 ** self.t)
                vh = v / (1 - tc.beta2 ** self.t)
                out[k] = values[k] - tc.learning_rate * mh / (np.sqrt(vh) + tc.eps)
        return out


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, step: int, history: list):
        super().__init__(f"non-finite loss at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step
        self.history = history


def train_step(params: NetworkParams, x_tilde, x, y_hat, optimizer: Optimizer,
               mode: str = "sdcn", gamma: float | None = None,
               trainable: str = "all") -> tuple[NetworkParams, LossRecord, np.ndarray]:
    """One optimizer step on a batch; returns new params, the pre-step loss and probabilities.

    ``trainable`` restricts the update to ``theta1`` or ``theta2`` (two-step mode).
    """
    if mode == "decomposition":
        w1, w2 = 1.0, 0.0
    else:
        w1, w2 = _weights(params.config, mode, gamma)
    rec, grads, probs = loss_and_grads(params, x_tilde, x, y_hat, w1, w2)
    if not np.isfinite(rec.total):
        raise FloatingPointError(f"non-finite loss {rec}")
    values = dict(params.items())
    names = {"all": list(values), "theta1": list(params.theta1),
             "theta2": list(params.theta2)}[trainable]
    return params.with_values(optimizer.step(values, grads, names)), rec, probs


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    l1: float
    l2: float
    total: float
    accuracy: float


def train(dataset, net_config: NetworkConfig, train_config: TrainConfig,
          mode: str = "sdcn", params: NetworkParams | None = None,
          ) -> tuple[NetworkParams, list[EpochRecord]]:
    """Minibatch training with per-epoch seeded shuffling.

    ``mode``: ``sdcn`` (joint loss), ``cnn_only`` (cross-entropy only, same
    architecture) or ``two_step`` (decomposition-only epochs, then classification
    epochs on the frozen decomposer; the first ceil(epochs/2) epochs are phase one).
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if len(dataset) == 0:
        raise ValueError("training set is empty")
    if dataset.x.shape[1:] != (net_config.channels, net_config.chip_h, net_config.chip_w):
        raise L.ShapeError(
            f"dataset chips {dataset.x.shape[1:]} do not match network input "
            f"{(net_config.channels, net_config.chip_h, net_config.chip_w)}")
    tc = train_config
    if params is None:
        params = init_params(net_config, tc.seed)
    rng = np.random.default_rng(np.random.SeedSequence([tc.seed, 7]))
    y_all = dataset.one_hot()
    history: list[EpochRecord] = []
    optimizer = Optimizer(tc)
    n = len(dataset)
    phase_one = -(-tc.epochs // 2)
    for epoch in range(tc.epochs):
        if mode == "two_step":
            step_mode, trainable = (("decomposition", "theta1") if epoch < phase_one
                                    else ("cnn_only", "theta2"))
            if epoch == phase_one:
                optimizer = Optimizer(tc)
        else:
            step_mode, trainable = mode, "all"
        order = rng.permutation(n)
        sums = np.zeros(3)
        correct = 0
        for step, start in enumerate(range(0, n, tc.batch_size)):
            idx = order[start:start + tc.batch_size]
            try:
                params, rec, probs = train_step(params, dataset.x_tilde[idx], dataset.x[idx],
                                                y_all[idx], optimizer, step_mode, tc.gamma,
                                                trainable)
            except FloatingPointError:
                raise TrainingDiverged(epoch, step, history) from None
            sums += len(idx) * np.array([rec.total, rec.l1, rec.l2])
            correct += int(np.sum(np.argmax(probs, axis=1) == dataset.labels[idx]))
        total, l1, l2 = sums / n
        history.append(EpochRecord(epoch + 1, l1, l2, total, correct / n))
        log.info("epoch %d: total=%.5f l1=%.5f l2=%.5f acc=%.4f", epoch + 1, total, l1, l2,
                 correct / n)
    return params, history


def config_dict(cfg: NetworkConfig) -> dict:
    return asdict(cfg)
