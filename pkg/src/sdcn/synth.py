"""Synthetic multi-polarization SAR-like chips.

Objects are rendered as sets of anisotropic Gaussian scatterers defined in
normalized chip coordinates (the chip spans [-1, 1] along its shorter side),
so the same template renders at any chip size.  Ground clutter is a smoothed
Gaussian random field.  Noisy inputs follow ``x_tilde = x + lam * g``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import gaussian_filter

POLARIZATIONS = ("HH", "HV", "VV")
TRAIN_ANGLES = tuple(float(a) for a in range(0, 360, 30))
TEST_LAMBDAS = (1.0, 2.0, 3.0, 4.0, 5.0)
TRAIN_LAMBDA_RANGE = (0.5, 5.5)
TARGET, CONFUSER = 0, 1
MIN_CHIP = 8


@dataclass(frozen=True)
class Scatterer:
    x: float
    y: float
    amps: tuple[float, float, float]  # HH, HV, VV
    sigma_along: float
    sigma_across: float
    orientation: float = 0.0  # radians, object frame


@dataclass(frozen=True)
class ObjectTemplate:
    class_kind: int  # TARGET or CONFUSER
    class_id: int  # 1..5
    name: str
    scatterers: tuple[Scatterer, ...]

    def __post_init__(self):
        if len(self.scatterers) < 2:
            raise ValueError(f"template {self.name} needs at least 2 scatterers")


@dataclass(frozen=True)
class GroundModel:
    scale: float = 1.0
    correlation_length: float = 2.5  # Gaussian smoothing sigma, pixels
    seed: int = 0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"ground scale must be positive, got {self.scale}")


def _co(hh: float, vv: float, hv_frac: float = 0.25) -> tuple[float, float, float]:
    hv = hv_frac * min(abs(hh), abs(vv))
    return (hh, hv, vv)


def _ring(n: int, radius: float, amp: tuple[float, float, float], sigma: float,
          phase: float = 0.0) -> list[Scatterer]:
    out = []
    for k in range(n):
        t = phase + 2 * math.pi * k / n
        out.append(Scatterer(radius * math.cos(t), radius * math.sin(t), amp, sigma, sigma))
    return out


def _templates() -> tuple[ObjectTemplate, ...]:
    # Metallic targets: regular geometric layouts, co-pol returns in phase.
    t1 = ObjectTemplate(TARGET, 1, "T1 anti-tank mine (metal)", tuple(
        _ring(8, 0.5, _co(0.8, 0.75), 0.13) + [Scatterer(0, 0, _co(1.0, 0.9), 0.2, 0.2)]))
    t2 = ObjectTemplate(TARGET, 2, "T2 plastic mine", tuple(
        _ring(4, 0.42, _co(0.55, 0.65), 0.15, math.pi / 4)
        + [Scatterer(0, 0, _co(0.8, 0.9), 0.22, 0.22)]))
    t3 = ObjectTemplate(TARGET, 3, "T3 mine, double edge", (
        Scatterer(-0.5, 0, _co(1.0, 0.95), 0.12, 0.38, 0.0),
        Scatterer(0.5, 0, _co(1.0, 0.95), 0.12, 0.38, 0.0),
        Scatterer(0, 0, _co(0.4, 0.35), 0.16, 0.16)))
    t4 = ObjectTemplate(TARGET, 4, "T4 cylindrical mine", (
        Scatterer(0, 0.42, _co(0.9, 0.85), 0.48, 0.11),
        Scatterer(0, -0.42, _co(0.9, 0.85), 0.48, 0.11),
        Scatterer(0, 0, _co(0.6, 0.6), 0.16, 0.16)))
    t5 = ObjectTemplate(TARGET, 5, "T5 155 mm shell", (
        Scatterer(-0.6, 0, _co(0.7, 0.6), 0.2, 0.11),
        Scatterer(0.0, 0, _co(1.0, 0.9), 0.32, 0.12),
        Scatterer(0.6, 0, _co(0.8, 0.7), 0.2, 0.11)))
    # Clutter: irregular, diffuse clusters with VV out of phase or unbalanced vs HH.
    c1 = ObjectTemplate(CONFUSER, 1, "C1 soda can", (
        Scatterer(0.08, 0.03, _co(1.0, -0.6), 0.16, 0.22, 0.3),
        Scatterer(-0.3, 0.25, _co(0.45, -0.3), 0.14, 0.14)))
    c2 = ObjectTemplate(CONFUSER, 2, "C2 rock", (
        Scatterer(-0.3, 0.25, _co(0.9, -0.5), 0.26, 0.17, 0.6),
        Scatterer(0.35, -0.08, _co(0.6, 0.2), 0.2, 0.2),
        Scatterer(0.08, -0.45, _co(0.5, -0.4), 0.15, 0.22, 1.1)))
    c3 = ObjectTemplate(CONFUSER, 3, "C3 rock", (
        Scatterer(0.15, 0.3, _co(0.7, -0.8), 0.32, 0.22, 2.0),
        Scatterer(-0.38, -0.22, _co(1.0, -0.3), 0.2, 0.16, 0.4)))
    c4 = ObjectTemplate(CONFUSER, 4, "C4 rock", (
        Scatterer(-0.45, -0.15, _co(0.5, 0.1), 0.18, 0.18),
        Scatterer(0.0, 0.4, _co(0.8, -0.6), 0.22, 0.14, 0.9),
        Scatterer(0.45, 0.08, _co(1.0, -0.2), 0.15, 0.27, 2.4),
        Scatterer(0.08, -0.45, _co(0.4, 0.3), 0.14, 0.14)))
    c5 = ObjectTemplate(CONFUSER, 5, "C5 rock", (
        Scatterer(0.0, 0.0, _co(1.0, -0.7), 0.4, 0.25, 1.3),
        Scatterer(0.5, 0.45, _co(0.45, 0.1), 0.16, 0.16)))
    return (t1, t2, t3, t4, t5, c1, c2, c3, c4, c5)


TEMPLATES: tuple[ObjectTemplate, ...] = _templates()


def template(class_kind: int, class_id: int) -> ObjectTemplate:
    for t in TEMPLATES:
        if t.class_kind == class_kind and t.class_id == class_id:
            return t
    raise KeyError((class_kind, class_id))


def _channel_index(channels) -> list[int]:
    channels = tuple(channels)
    if not channels:
        raise ValueError("channel list must be nonempty")
    if len(set(channels)) != len(channels):
        raise ValueError(f"duplicate channels in {channels}")
    try:
        return [POLARIZATIONS.index(c) for c in channels]
    except ValueError:
        raise ValueError(f"unknown polarization in {channels}; expected {POLARIZATIONS}") from None


def parse_combo(combo: str | tuple[str, ...] | list[str]) -> tuple[str, ...]:
    """'HH-VV' or ('VV', 'HH') -> ('HH', 'VV'), canonical HH, HV, VV order."""
    names = combo.split("-") if isinstance(combo, str) else list(combo)
    names = [n.strip().upper() for n in names if n.strip()]
    _channel_index(names)
    return tuple(p for p in POLARIZATIONS if p in names)


def combo_name(channels) -> str:
    return "-".join(channels)


def _grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    s = min(h, w) / 2.0
    u = (np.arange(w) - (w - 1) / 2.0) / s
    v = ((h - 1) / 2.0 - np.arange(h)) / s
    return np.meshgrid(u, v)


def make_object_chip(tmpl: ObjectTemplate, aspect_angle: float, channels=POLARIZATIONS,
                     h: int = 32, w: int = 32, seed: int = 0) -> np.ndarray:
    """Render ``tmpl`` rotated by ``aspect_angle`` degrees; returns ``(c, h, w)``.

    ``seed`` jitters scatterer amplitudes by a few percent in the object frame, so
    rotation symmetry holds for any fixed seed.  The largest absolute value over
    all three polarizations is 1.
    """
    if not 0.0 <= aspect_angle < 360.0:
        raise ValueError(f"aspect angle must lie in [0, 360), got {aspect_angle}")
    if min(h, w) < MIN_CHIP:
        raise ValueError(f"chip {h}x{w} too small to resolve scatterers (min side {MIN_CHIP})")
    idx = _channel_index(channels)
    rng = np.random.default_rng(seed)
    jitter = 1.0 + 0.05 * rng.standard_normal((len(tmpl.scatterers), 3))

    gx, gy = _grid(h, w)
    th = math.radians(aspect_angle)
    c, s = math.cos(th), math.sin(th)
    # pixel position expressed in the object frame (rotate by -theta)
    ox = c * gx + s * gy
    oy = -s * gx + c * gy

    img = np.zeros((3, h, w))
    for k, sc in enumerate(tmpl.scatterers):
        co, so = math.cos(sc.orientation), math.sin(sc.orientation)
        dx, dy = ox - sc.x, oy - sc.y
        a = co * dx + so * dy
        b = -so * dx + co * dy
        blob = np.exp(-0.5 * ((a / sc.sigma_along) ** 2 + (b / sc.sigma_across) ** 2))
        for p in range(3):
            img[p] += sc.amps[p] * jitter[k, p] * blob

    # faint cross-range sidelobe streak through the strongest scatterer
    k0 = int(np.argmax([abs(sc.amps[0]) for sc in tmpl.scatterers]))
    sc = tmpl.scatterers[k0]
    streak = np.exp(-0.5 * ((oy - sc.y) / 0.05) ** 2) * np.exp(-np.abs(ox - sc.x) / 0.5)
    img[0] += 0.06 * sc.amps[0] * streak
    img[2] += 0.06 * sc.amps[2] * streak

    img /= np.abs(img).max()
    return img[idx]


def make_ground_chip(model: GroundModel, h: int = 32, w: int = 32,
                     channels=POLARIZATIONS) -> np.ndarray:
    """Smoothed zero-mean random field; each channel has RMS exactly ``model.scale``.

    HH and VV share part of their structure (correlation 0.6); HV is independent.
    """
    idx = _channel_index(channels)
    rng = np.random.default_rng(model.seed)
    white = rng.standard_normal((3, h, w))
    fields = np.stack([gaussian_filter(white[i], model.correlation_length, mode="wrap")
                       for i in range(3)])
    fields -= fields.mean(axis=(1, 2), keepdims=True)
    fields /= np.sqrt((fields ** 2).mean(axis=(1, 2), keepdims=True))
    hh, hv, vv = fields
    vv = 0.6 * hh + 0.8 * vv
    g = np.stack([hh, hv, vv])
    g -= g.mean(axis=(1, 2), keepdims=True)
    g /= np.sqrt((g ** 2).mean(axis=(1, 2), keepdims=True))
    return model.scale * g[idx]


def augment(x: np.ndarray, g: np.ndarray, lam: float) -> np.ndarray:
    """Noisy observation ``x + lam * g``."""
    if x.shape != g.shape:
        raise ValueError(f"object chip {x.shape} and ground chip {g.shape} are incompatible")
    if lam < 0:
        raise ValueError(f"noise level must be nonnegative, got {lam}")
    return x + lam * g


@dataclass
class Dataset:
    """Noisy/clean chip pairs with labels (0 = target, 1 = confuser)."""
    x_tilde: np.ndarray  # (N, c, H, W)
    x: np.ndarray
    labels: np.ndarray  # (N,) int
    lambdas: np.ndarray  # (N,) float
    channels: tuple[str, ...]
    lambda_range: tuple[float, float] = TRAIN_LAMBDA_RANGE
    lambda_levels: tuple[float, ...] = ()
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def chip_shape(self) -> tuple[int, int]:
        return self.x.shape[2], self.x.shape[3]

    @property
    def ground(self) -> np.ndarray:
        """Recovered ground chips ``(x_tilde - x) / lam`` (zero where lam == 0)."""
        lam = self.lambdas[:, None, None, None]
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(lam > 0, (self.x_tilde - self.x) / np.where(lam > 0, lam, 1), 0.0)

    def subset(self, mask) -> "Dataset":
        m = np.asarray(mask)
        meta = {k: np.asarray(v)[m] for k, v in self.meta.items()}
        return replace(self, x_tilde=self.x_tilde[m], x=self.x[m], labels=self.labels[m],
                       lambdas=self.lambdas[m], meta=meta)

    def partition(self, lam: float) -> "Dataset":
        return self.subset(self.lambdas == lam)

    def one_hot(self) -> np.ndarray:
        return np.eye(2)[self.labels]


def _ground_pool(n: int, rng: np.random.Generator, h: int, w: int, corr: float,
                 scale: float) -> np.ndarray:
    seeds = rng.integers(0, 2**63 - 1, size=n)
    return np.stack([make_ground_chip(GroundModel(scale, corr, int(s)), h, w) for s in seeds])


def clean_training_chips(h: int = 32, w: int = 32, seed: int = 0):
    """All templates at the 12 training angles: returns (chips (120,3,h,w), labels, class_ids, angles)."""
    chips, labels, ids, angles = [], [], [], []
    for t in TEMPLATES:
        for a in TRAIN_ANGLES:
            chips.append(make_object_chip(t, a, POLARIZATIONS, h, w, seed=seed * 1000 + t.class_kind * 10 + t.class_id))
            labels.append(t.class_kind)
            ids.append(t.class_id)
            angles.append(a)
    return np.stack(chips), np.array(labels), np.array(ids), np.array(angles)


def build_training_set(n_per_class: int = 10_000, lambda_range=TRAIN_LAMBDA_RANGE,
                       channels=POLARIZATIONS, seed: int = 0, h: int = 32, w: int = 32,
                       n_grounds: int = 120, correlation_length: float = 2.5,
                       ground_scale: float = 1.0) -> Dataset:
    """Augmented training pairs drawn from the 12-angle clean set and a finite ground pool."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    lo, hi = map(float, lambda_range)
    if not 0 <= lo <= hi:
        raise ValueError(f"invalid lambda range {lambda_range}")
    idx = _channel_index(channels)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    clean, clean_labels, clean_ids, clean_angles = clean_training_chips(h, w)
    grounds = _ground_pool(n_grounds, rng, h, w, correlation_length, ground_scale)

    labels = rng.permutation(np.repeat([TARGET, CONFUSER], n_per_class))
    n = labels.size
    per_class_rows = {k: np.flatnonzero(clean_labels == k) for k in (TARGET, CONFUSER)}
    rows = np.array([rng.choice(per_class_rows[k]) for k in labels])
    gi = rng.integers(0, n_grounds, size=n)
    lams = rng.uniform(lo, hi, size=n)

    x = clean[rows][:, idx]
    g = grounds[gi][:, idx]
    x_tilde = x + lams[:, None, None, None] * g
    meta = {"class_id": clean_ids[rows], "angle": clean_angles[rows], "ground": gi}
    return Dataset(x_tilde, x, labels.astype(np.int64), lams, tuple(POLARIZATIONS[i] for i in idx),
                   (lo, hi), (), meta)


def _random_test_angles(rng: np.random.Generator, n: int) -> np.ndarray:
    out = []
    while len(out) < n:
        a = float(rng.uniform(0.0, 360.0))
        if a not in TRAIN_ANGLES:
            out.append(a)
    return np.array(out)


def build_test_set(lambdas=TEST_LAMBDAS, n_angles: int = 100, channels=POLARIZATIONS,
                   seed: int = 0, h: int = 32, w: int = 32,
                   correlation_length: float = 2.5, ground_scale: float = 1.0) -> Dataset:
    """One item per (lambda, class, random angle); ordered by lambda, then class, then angle.

    Angles, object jitter and ground realizations are shared across lambda levels
    so curves over lambda compare like with like.
    """
    idx = _channel_index(channels)
    lambdas = tuple(float(l) for l in lambdas)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    base_x, base_g, base_labels, base_ids, base_angles = [], [], [], [], []
    for t in TEMPLATES:
        angles = _random_test_angles(rng, n_angles)
        jitter_seeds = rng.integers(0, 2**63 - 1, size=n_angles)
        ground_seeds = rng.integers(0, 2**63 - 1, size=n_angles)
        for a, js, gs in zip(angles, jitter_seeds, ground_seeds):
            base_x.append(make_object_chip(t, a, POLARIZATIONS, h, w, seed=int(js)))
            base_g.append(make_ground_chip(GroundModel(ground_scale, correlation_length, int(gs)), h, w))
            base_labels.append(t.class_kind)
            base_ids.append(t.class_id)
            base_angles.append(a)
    bx = np.stack(base_x)[:, idx]
    bg = np.stack(base_g)[:, idx]
    m = len(base_labels)
    x = np.concatenate([bx] * len(lambdas))
    lam = np.repeat(np.array(lambdas), m)
    x_tilde = np.concatenate([bx + l * bg for l in lambdas])
    meta = {"class_id": np.tile(base_ids, len(lambdas)), "angle": np.tile(base_angles, len(lambdas))}
    return Dataset(x_tilde, x, np.tile(np.array(base_labels, dtype=np.int64), len(lambdas)), lam,
                   tuple(POLARIZATIONS[i] for i in idx),
                   (min(lambdas), max(lambdas)) if lambdas else (0.0, 0.0), lambdas, meta)


def select_channels(ds: Dataset, combo) -> Dataset:
    """Channel-sliced copy of ``ds`` restricted to ``combo`` (e.g. 'HH-VV')."""
    wanted = parse_combo(combo)
    missing = [c for c in wanted if c not in ds.channels]
    if missing:
        raise ValueError(f"channels {missing} not present in dataset channels {ds.channels}")
    idx = [ds.channels.index(c) for c in wanted]
    return replace(ds, x_tilde=ds.x_tilde[:, idx].copy(), x=ds.x[:, idx].copy(), channels=wanted,
                   meta=dict(ds.meta))
