"""Sparse-representation classification with a shared ground dictionary.

A noisy chip is coded over ``D = [D_t | D_c | D_g]`` (targets, confusers,
grounds).  The ground part of the code is subtracted to obtain the denoised
chip, and the label is the class whose atoms best reconstruct what is left.
Multichannel chips use simultaneous OMP: one support shared by all channels,
coefficients fitted per channel.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .io import read_container, write_container

BLOCKS = ("t", "c", "g")


@dataclass
class Dictionary:
    atoms: list[np.ndarray]  # one (d, K) matrix per channel, unit-norm columns
    blocks: dict[str, tuple[int, int]]  # half-open column ranges for t, c, g
    channels: tuple[str, ...] = ()
    chip_shape: tuple[int, int] = (0, 0)

    @property
    def n_atoms(self) -> int:
        return self.atoms[0].shape[1]

    def block(self, name: str) -> slice:
        lo, hi = self.blocks[name]
        return slice(lo, hi)


@dataclass
class SparseCode:
    support: list[int]
    coefficients: np.ndarray  # (channels, len(support))
    residual_norms: np.ndarray  # per channel, final
    history: list[float] = field(default_factory=list)  # joint residual norm per iteration
    rank_deficient: bool = False

    def dense(self, n_atoms: int) -> np.ndarray:
        out = np.zeros((self.coefficients.shape[0], n_atoms))
        out[:, self.support] = self.coefficients
        return out


def _normalize_columns(m: np.ndarray, offset: int = 0) -> np.ndarray:
    norms = np.linalg.norm(m, axis=0)
    bad = np.flatnonzero(norms == 0)
    if bad.size:
        raise ValueError(f"zero-norm dictionary column at index {offset + int(bad[0])}")
    return m / norms


def build_dictionary(targets: np.ndarray, confusers: np.ndarray, grounds: np.ndarray,
                     channels: tuple[str, ...] = ()) -> Dictionary:
    """Columns are vectorized chips per channel; inputs are ``(M, c, H, W)`` stacks."""
    parts = [np.asarray(a, dtype=float) for a in (targets, confusers, grounds)]
    if any(len(p) == 0 for p in parts):
        raise ValueError("target, confuser and ground sets must all be nonempty")
    c, h, w = parts[0].shape[1:]
    if any(p.shape[1:] != (c, h, w) for p in parts):
        raise ValueError("all chips must share the same (c, H, W) shape")
    stacked = np.concatenate(parts)  # (K, c, H, W)
    atoms = [_normalize_columns(stacked[:, p].reshape(len(stacked), -1).T) for p in range(c)]
    nt, nc = len(parts[0]), len(parts[1])
    blocks = {"t": (0, nt), "c": (nt, nt + nc), "g": (nt + nc, len(stacked))}
    return Dictionary(atoms, blocks, tuple(channels), (h, w))


def dictionary_from_training_set(ds, max_grounds: int | None = None) -> Dictionary:
    """Distinct clean chips and recovered ground chips of an augmented training set."""
    flat = ds.x.reshape(len(ds), -1)
    _, first = np.unique(flat, axis=0, return_index=True)
    first = np.sort(first)
    clean, labels = ds.x[first], ds.labels[first]
    pos = ds.lambdas > 0
    g = (ds.x_tilde[pos] - ds.x[pos]) / ds.lambdas[pos, None, None, None]
    _, gfirst = np.unique(np.round(g.reshape(len(g), -1), 9), axis=0, return_index=True)
    grounds = g[np.sort(gfirst)]
    if max_grounds is not None:
        grounds = grounds[:max_grounds]
    return build_dictionary(clean[labels == 0], clean[labels == 1], grounds, ds.channels)


def somp(atoms: list[np.ndarray], signal: np.ndarray, k: int = 8,
         tol: float = 1e-6) -> SparseCode:
    """Simultaneous OMP over per-channel dictionaries sharing one support.

    ``signal`` is ``(channels, d)``.  Each iteration adds the atom with the
    largest l2 norm (over channels) of residual correlations, lowest index on
    ties, then refits every channel by least squares on the support.  Stops after
    ``k`` atoms or once the joint residual norm is at most ``tol * ||signal||``.
    """
    signal = np.atleast_2d(np.asarray(signal, dtype=float))
    c = signal.shape[0]
    if len(atoms) != c:
        raise ValueError(f"{len(atoms)} channel dictionaries for a {c}-channel signal")
    if any(a.shape[0] != signal.shape[1] for a in atoms):
        raise ValueError("signal dimension does not match atom dimension")
    if k < 0:
        raise ValueError("k must be >= 0")
    n_atoms = atoms[0].shape[1]
    residual = signal.copy()
    support: list[int] = []
    coefs = np.zeros((c, 0))
    stop = tol * np.linalg.norm(signal)
    history = [float(np.linalg.norm(residual))]
    deficient = False
    while len(support) < min(k, n_atoms) and history[-1] > stop:
        corr = np.stack([a.T @ r for a, r in zip(atoms, residual)])
        score = np.abs(corr[0]) if c == 1 else np.sqrt((corr ** 2).sum(axis=0))
        score[support] = -1.0
        j = int(np.argmax(score))
        if score[j] <= 0:
            break
        support.append(j)
        coefs = np.empty((c, len(support)))
        for p in range(c):
            sub = atoms[p][:, support]
            sol, _, rank, _ = np.linalg.lstsq(sub, signal[p], rcond=None)
            deficient |= rank < len(support)
            coefs[p] = sol
            residual[p] = signal[p] - sub @ sol
        history.append(float(np.linalg.norm(residual)))
    return SparseCode(support, coefs, np.linalg.norm(residual, axis=1), history, deficient)


def omp(atoms: np.ndarray, signal: np.ndarray, k: int = 8, tol: float = 1e-6) -> SparseCode:
    """Orthogonal matching pursuit for a single channel (``atoms`` is ``(d, K)``)."""
    return somp([atoms], np.asarray(signal, dtype=float)[None], k, tol)


@dataclass
class SRCResult:
    label: int
    x_bar: np.ndarray
    residuals: np.ndarray  # [target, confuser]
    code: SparseCode


def src_classify(dictionary: Dictionary, x_tilde: np.ndarray, k: int = 8,
                 tol: float = 1e-6) -> SRCResult:
    """Ground elimination followed by the minimum class-residual rule (ties -> target)."""
    x_tilde = np.asarray(x_tilde, dtype=float)
    c = len(dictionary.atoms)
    if x_tilde.ndim != 3 or x_tilde.shape[0] != c:
        raise ValueError(f"expected a ({c}, H, W) chip, got {x_tilde.shape}")
    sig = x_tilde.reshape(c, -1)
    code = somp(dictionary.atoms, sig, k, tol)
    a = code.dense(dictionary.n_atoms)
    g = dictionary.block("g")
    x_bar = np.stack([sig[p] - dictionary.atoms[p][:, g] @ a[p, g] for p in range(c)])
    res = []
    for name in ("t", "c"):
        b = dictionary.block(name)
        r = np.stack([x_bar[p] - dictionary.atoms[p][:, b] @ a[p, b] for p in range(c)])
        res.append(float(np.linalg.norm(r)))
    res = np.array(res)
    label = 0 if res[0] <= res[1] else 1
    return SRCResult(label, x_bar.reshape(x_tilde.shape), res, code)


def src_classify_single(dictionary: Dictionary, x_tilde: np.ndarray, k: int = 8,
                        tol: float = 1e-6) -> SRCResult:
    """Channels coded independently with OMP; squared class residuals summed over channels.

    Differs from :func:`src_classify` only in dropping the shared support.
    """
    x_tilde = np.asarray(x_tilde, dtype=float)
    c = len(dictionary.atoms)
    if x_tilde.ndim != 3 or x_tilde.shape[0] != c:
        raise ValueError(f"expected a ({c}, H, W) chip, got {x_tilde.shape}")
    sig = x_tilde.reshape(c, -1)
    g = dictionary.block("g")
    x_bar = np.empty_like(sig)
    res = np.zeros(2)
    codes = []
    for p in range(c):
        code = omp(dictionary.atoms[p], sig[p], k, tol)
        codes.append(code)
        a = code.dense(dictionary.n_atoms)[0]
        x_bar[p] = sig[p] - dictionary.atoms[p][:, g] @ a[g]
        for i, name in enumerate(("t", "c")):
            b = dictionary.block(name)
            res[i] += float(np.sum((x_bar[p] - dictionary.atoms[p][:, b] @ a[b]) ** 2))
    res = np.sqrt(res)
    label = 0 if res[0] <= res[1] else 1
    # report the first channel's code; the per-channel supports generally differ
    return SRCResult(label, x_bar.reshape(x_tilde.shape), res, codes[0])


def src_predict(dictionary: Dictionary, x_tilde: np.ndarray, k: int = 8, tol: float = 1e-6,
                shared_support: bool = True):
    """Labels and denoised chips for a batch ``(N, c, H, W)``."""
    fn = src_classify if shared_support else src_classify_single
    out = [fn(dictionary, x, k, tol) for x in x_tilde]
    labels = np.array([r.label for r in out], dtype=np.int64)
    x_bar = np.stack([r.x_bar for r in out]) if out else np.zeros_like(x_tilde)
    return labels, x_bar


def save_dictionary(path, d: Dictionary) -> None:
    cfg = {"kind": "src-dictionary", "channels": "-".join(d.channels) or "none",
           "chip_h": d.chip_shape[0], "chip_w": d.chip_shape[1]}
    for name, (lo, hi) in d.blocks.items():
        cfg[f"block_{name}"] = f"{lo}:{hi}"
    tensors = {f"atoms.{i}": a for i, a in enumerate(d.atoms)}
    write_container(path, cfg, tensors)


def load_dictionary(path) -> Dictionary:
    cfg, tensors = read_container(path)
    if cfg.get("kind") != "src-dictionary":
        raise ValueError(f"{path}: not an SRC dictionary")
    blocks = {}
    for name in BLOCKS:
        lo, hi = cfg[f"block_{name}"].split(":")
        blocks[name] = (int(lo), int(hi))
    atoms = [tensors[f"atoms.{i}"] for i in range(len(tensors))]
    channels = () if cfg["channels"] == "none" else tuple(cfg["channels"].split("-"))
    return Dictionary(atoms, blocks, channels, (int(cfg["chip_h"]), int(cfg["chip_w"])))
