"""Run presets and the layered ``key = value`` configuration used by the CLI.

Resolution order, later wins: preset, config file, command-line flags.
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .io import FormatError, parse_config
from .model import NetworkConfig, TrainConfig
from .synth import TEST_LAMBDAS, TRAIN_LAMBDA_RANGE

OUT_ENV = "SDCN_OUT"
DEFAULT_OUT = "sdcn_out"


@dataclass(frozen=True)
class RunConfig:
    preset: str = "paper"
    seed: int = 0
    # generator
    chip: int = 32
    n_per_class: int = 10_000
    test_angles: int = 100
    n_grounds: int = 120
    lambda_lo: float = TRAIN_LAMBDA_RANGE[0]
    lambda_hi: float = TRAIN_LAMBDA_RANGE[1]
    test_lambdas: tuple[float, ...] = TEST_LAMBDAS
    ground_scale: float = 0.5
    correlation_length: float = 4.0
    # network
    d1: int = 10
    d2: int = 3
    filters: int = 64
    fc1: int = 512
    fc2: int = 128
    gamma: float = 1.0
    # training
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    # SRC solver
    k: int = 8
    tol: float = 1e-6

    def network(self, channels: int, chip: int | None = None) -> NetworkConfig:
        c = chip or self.chip
        return NetworkConfig(d1=self.d1, d2=self.d2, channels=channels, chip_h=c, chip_w=c,
                             filters=self.filters, fc1=self.fc1, fc2=self.fc2, gamma=self.gamma)

    def training(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                           learning_rate=self.learning_rate, optimizer=self.optimizer,
                           seed=self.seed)

    def as_text(self) -> str:
        lines = []
        for k, v in asdict(self).items():
            if isinstance(v, tuple):
                v = ", ".join(repr(x) for x in v)
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"


PRESETS = {
    # the published protocol: 10,000 samples per class, 100 test angles, 50 epochs
    "paper": RunConfig(),
    # desk scale: about 2 minutes of training per model on one core
    "desk": RunConfig(preset="desk", chip=24, n_per_class=1000, test_angles=20, d1=4,
                      filters=8, epochs=20),
}

_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(name: str, value):
    if name not in _FIELDS:
        raise FormatError(f"unknown config key {name!r}")
    default = getattr(RunConfig(), name)
    if isinstance(value, str):
        value = value.strip()
        if isinstance(default, tuple):
            return tuple(float(x) for x in value.replace(",", " ").split())
        if isinstance(default, bool):
            return value.lower() in ("1", "true", "yes")
        try:
            return type(default)(value)
        except ValueError:
            raise FormatError(f"{name}: cannot parse {value!r} as {type(default).__name__}")
    if isinstance(default, tuple):
        return tuple(float(x) for x in value)
    return type(default)(value)


def resolve(preset: str | None = None, config_file=None, overrides: dict | None = None) -> RunConfig:
    """Preset, then file, then explicit overrides (``None`` values are ignored).

    A ``preset`` key in the file is honored unless a preset is passed explicitly.
    """
    file_values: dict[str, str] = {}
    if config_file is not None:
        path = Path(config_file)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        file_values = parse_config(path.read_text(encoding="utf-8"))
    name = preset or file_values.pop("preset", None) or "paper"
    file_values.pop("preset", None)
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    cfg = PRESETS[name]
    layered = {k: _coerce(k, v) for k, v in file_values.items()}
    layered.update({k: _coerce(k, v) for k, v in (overrides or {}).items() if v is not None})
    cfg = replace(cfg, **layered)
    if cfg.chip < 8:
        raise ValueError("chip must be at least 8 pixels")
    if not 0 <= cfg.lambda_lo <= cfg.lambda_hi:
        raise ValueError(f"invalid lambda range [{cfg.lambda_lo}, {cfg.lambda_hi}]")
    return cfg


def default_out_dir() -> Path:
    return Path(os.environ.get(OUT_ENV) or DEFAULT_OUT)
