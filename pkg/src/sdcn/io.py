"""Binary containers for checkpoints, dictionaries and datasets.

All integers and floats are little-endian.

Tensor container (checkpoints, SRC dictionaries)::

    b"SDCN1"
    u32 config length, config text (UTF-8 ``key = value`` lines, sorted by key)
    u32 tensor count
    per tensor: u16 name length, name (UTF-8), u8 rank, rank x u32 dims,
                prod(dims) x f64 values in row-major order

Dataset container::

    b"SDCD1"
    u32 sample count, u8 channel count, per channel: u8 length + ASCII name
    u32 height, u32 width
    f64 lambda low, f64 lambda high, u32 level count, levels x f64
    per sample: u8 label, f64 lambda, x_tilde (c*H*W f64), x (c*H*W f64)
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .model import NetworkConfig, NetworkParams, decomposition_layers
from .synth import Dataset

MODEL_MAGIC = b"SDCN1"
DATA_MAGIC = b"SDCD1"


class FormatError(ValueError):
    pass


def format_config(cfg: dict) -> str:
    lines = []
    for k in sorted(cfg):
        v = cfg[k]
        if isinstance(v, float):
            v = repr(v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def parse_config(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are ignored."""
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {n}: expected 'key = value', got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def write_container(path, config: dict, tensors: dict[str, np.ndarray]) -> None:
    buf = bytearray(MODEL_MAGIC)
    cfg = format_config(config).encode()
    buf += struct.pack("<I", len(cfg)) + cfg
    buf += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        nb = name.encode()
        buf += struct.pack("<H", len(nb)) + nb
        buf += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr).tobytes()
    Path(path).write_bytes(bytes(buf))


def read_container(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:5] != MODEL_MAGIC:
        raise FormatError(f"{path}: not an SDCN1 container")
    pos = 5
    (n,) = struct.unpack_from("<I", data, pos)
    pos += 4
    config = parse_config(data[pos:pos + n].decode())
    pos += n
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (nl,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nl].decode()
        pos += nl
        (rank,) = struct.unpack_from("<B", data, pos)
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(data, "<f8", size, pos).reshape(dims).astype(float)
        pos += 8 * size
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes")
    return config, tensors


_CONFIG_TYPES = {f: type(getattr(NetworkConfig(), f)) for f in NetworkConfig.__dataclass_fields__}


def save_checkpoint(path, params: NetworkParams, extra: dict | None = None) -> None:
    cfg = dict(params.config.__dict__)
    cfg.update(extra or {})
    cfg["kind"] = "sdcn-model"
    write_container(path, cfg, dict(params.items()))


def load_checkpoint(path) -> tuple[NetworkParams, dict[str, str]]:
    """Returns the parameters and any extra config keys stored with them."""
    raw, tensors = read_container(path)
    if raw.get("kind") != "sdcn-model":
        raise FormatError(f"{path}: not a model checkpoint (kind={raw.get('kind')})")
    kwargs = {k: _CONFIG_TYPES[k](raw[k]) for k in _CONFIG_TYPES}
    cfg = NetworkConfig(**kwargs)
    dec_names = {f"{s.name}.{p}" for s in decomposition_layers(cfg) if s.kind == "conv"
                 for p in "wb"}
    theta1 = {k: v for k, v in tensors.items() if k in dec_names}
    theta2 = {k: v for k, v in tensors.items() if k not in dec_names}
    extra = {k: v for k, v in raw.items() if k not in _CONFIG_TYPES and k != "kind"}
    return NetworkParams(cfg, theta1, theta2), extra


def _record_dtype(c: int, h: int, w: int) -> np.dtype:
    return np.dtype([("label", "u1"), ("lam", "<f8"), ("x_tilde", "<f8", (c, h, w)),
                     ("x", "<f8", (c, h, w))])


def save_dataset(path, ds: Dataset) -> None:
    n, c, h, w = ds.x.shape
    head = bytearray(DATA_MAGIC)
    head += struct.pack("<IB", n, c)
    for ch in ds.channels:
        b = ch.encode("ascii")
        head += struct.pack("<B", len(b)) + b
    head += struct.pack("<II", h, w)
    head += struct.pack("<ddI", ds.lambda_range[0], ds.lambda_range[1], len(ds.lambda_levels))
    head += struct.pack(f"<{len(ds.lambda_levels)}d", *ds.lambda_levels)
    rec = np.empty(n, dtype=_record_dtype(c, h, w))
    rec["label"] = ds.labels
    rec["lam"] = ds.lambdas
    rec["x_tilde"] = ds.x_tilde
    rec["x"] = ds.x
    Path(path).write_bytes(bytes(head) + rec.tobytes())


def _read_header(data: bytes, path) -> tuple[dict, int]:
    if data[:5] != DATA_MAGIC:
        raise FormatError(f"{path}: not an SDCD1 dataset")
    pos = 5
    n, c = struct.unpack_from("<IB", data, pos)
    pos += 5
    channels = []
    for _ in range(c):
        (ln,) = struct.unpack_from("<B", data, pos)
        pos += 1
        channels.append(data[pos:pos + ln].decode("ascii"))
        pos += ln
    h, w = struct.unpack_from("<II", data, pos)
    pos += 8
    lo, hi, nl = struct.unpack_from("<ddI", data, pos)
    pos += 20
    levels = struct.unpack_from(f"<{nl}d", data, pos)
    pos += 8 * nl
    header = {"samples": n, "channels": tuple(channels), "height": h, "width": w,
              "lambda_range": (lo, hi), "lambda_levels": tuple(levels)}
    return header, pos


def read_dataset_header(path) -> dict:
    with open(path, "rb") as f:
        head = f.read(4096)
    return _read_header(head, path)[0]


def load_dataset(path) -> Dataset:
    data = Path(path).read_bytes()
    hd, pos = _read_header(data, path)
    c, h, w = len(hd["channels"]), hd["height"], hd["width"]
    dt = _record_dtype(c, h, w)
    if len(data) - pos != hd["samples"] * dt.itemsize:
        raise FormatError(f"{path}: payload size does not match {hd['samples']} samples")
    rec = np.frombuffer(data, dt, hd["samples"], pos)
    return Dataset(rec["x_tilde"].astype(float), rec["x"].astype(float),
                   rec["label"].astype(np.int64), rec["lam"].astype(float), hd["channels"],
                   hd["lambda_range"], hd["lambda_levels"])


def describe_dataset(path) -> str:
    hd = read_dataset_header(path)
    ds = load_dataset(path)
    counts = np.bincount(ds.labels, minlength=2)
    lines = [f"file: {path}",
             f"samples: {hd['samples']} (targets {counts[0]}, confusers {counts[1]})",
             f"channels: {'-'.join(hd['channels'])}",
             f"chip: {hd['height']}x{hd['width']}",
             f"lambda range: [{hd['lambda_range'][0]:g}, {hd['lambda_range'][1]:g}]"]
    if hd["lambda_levels"]:
        lines.append("lambda levels: " + ", ".join(f"{l:g}" for l in hd["lambda_levels"]))
    return "\n".join(lines)
