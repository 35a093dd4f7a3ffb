"""SNR and accuracy tables, CSV export and SVG line charts."""
from __future__ import annotations

import csv
import io
import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence
from xml.sax.saxutils import escape

import numpy as np

log = logging.getLogger(__name__)

SNR_CAP_DB = 120.0
CSV_HEADER = ("method", "combo", "lambda", "metric", "value", "n")
METHODS = ("SDCN", "CNN_only", "SRC_SM", "SRC_single")


@dataclass(frozen=True)
class EvalRecord:
    method: str
    combo: str
    lam: float
    metric: str
    value: float
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("record needs n >= 1")
        if self.metric == "accuracy" and not 0.0 <= self.value <= 1.0:
            raise ValueError(f"accuracy {self.value} outside [0, 1]")

    def key(self):
        return (self.method, self.combo, self.lam, self.metric)


def snr_db_channels(x: np.ndarray, x_hat: np.ndarray) -> np.ndarray:
    """Per-channel ``10 log10(||x||^2 / ||x_hat - x||^2)``; channels on axis 0."""
    x = np.asarray(x, dtype=float)
    x_hat = np.asarray(x_hat, dtype=float)
    if x.shape != x_hat.shape:
        raise ValueError(f"reference {x.shape} and estimate {x_hat.shape} differ in shape")
    if x.ndim < 3:
        x, x_hat = x[None], x_hat[None]
    sig = np.sqrt((x.reshape(len(x), -1) ** 2).sum(axis=1))
    err = np.sqrt(((x_hat - x).reshape(len(x), -1) ** 2).sum(axis=1))
    if np.any(sig == 0):
        raise ValueError("SNR undefined for an all-zero reference channel")
    out = np.empty(len(x))
    for i, (s, e) in enumerate(zip(sig, err)):
        out[i] = SNR_CAP_DB if e <= 1e-12 * s else 20.0 * math.log10(s / e)
    return np.minimum(out, SNR_CAP_DB)


def snr_db(x: np.ndarray, x_hat: np.ndarray) -> float:
    """Channel-averaged SNR in dB; near-exact estimates are capped at +120 dB."""
    return float(np.mean(snr_db_channels(x, x_hat)))


def accuracy_table(method: str, combo: str, predictions: np.ndarray, labels: np.ndarray,
                   lambdas: np.ndarray, levels: Sequence[float] | None = None) -> list[EvalRecord]:
    """Fraction correct per noise level.

    ``levels`` lists the expected noise levels (default: those present); a level
    without samples is skipped with a warning.
    """
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    lambdas = np.asarray(lambdas, dtype=float)
    if not predictions.shape == labels.shape == lambdas.shape:
        raise ValueError("predictions, labels and lambdas must be aligned")
    out = []
    for lam in sorted(set(lambdas.tolist()) if levels is None else map(float, levels)):
        m = lambdas == lam
        if not m.any():
            log.warning("empty group %s/%s/lambda=%g omitted", method, combo, lam)
            continue
        out.append(EvalRecord(method, combo, lam, "accuracy",
                              float(np.mean(predictions[m] == labels[m])), int(m.sum())))
    return out


def snr_table(decomposer: Callable[[np.ndarray], np.ndarray], ds, method: str,
              combo: str | None = None) -> list[EvalRecord]:
    """Mean input and denoised SNR (dB) per noise level, averaged and per channel."""
    combo = combo or "-".join(ds.channels)
    x_bar = decomposer(ds.x_tilde)
    if x_bar.shape != ds.x_tilde.shape:
        raise ValueError(f"decomposer output {x_bar.shape} != input {ds.x_tilde.shape}")
    snr_in = np.stack([snr_db_channels(x, xt) for x, xt in zip(ds.x, ds.x_tilde)])
    snr_out = np.stack([snr_db_channels(x, xb) for x, xb in zip(ds.x, x_bar)])
    out = []
    for lam in sorted(set(ds.lambdas.tolist())):
        m = ds.lambdas == lam
        n = int(m.sum())
        for name, vals in (("snr_input_db", snr_in[m]), ("snr_denoised_db", snr_out[m])):
            out.append(EvalRecord(method, combo, lam, name, float(vals.mean()), n))
            for ci, ch in enumerate(ds.channels):
                out.append(EvalRecord(method, combo, lam, f"{name}_{ch}",
                                      float(vals[:, ci].mean()), n))
    return out


def _sorted(records: Iterable[EvalRecord]) -> list[EvalRecord]:
    return sorted(records, key=lambda r: r.key())


def _fmt(v: float) -> str:
    return f"{v:.9g}"


def to_csv(records: Iterable[EvalRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in _sorted(records):
        w.writerow([r.method, r.combo, _fmt(r.lam), r.metric, _fmt(r.value), r.n])
    return buf.getvalue()


def export_csv(records: Sequence[EvalRecord], path) -> None:
    """Write records sorted by (method, combo, lambda, metric), 9 significant digits."""
    if not records:
        raise ValueError("no records to export")
    path = Path(path)
    try:
        path.write_text(to_csv(records), encoding="utf-8")
    except OSError as e:
        raise OSError(f"cannot write {path}: {e.strerror}") from e


def read_csv(path) -> list[EvalRecord]:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if tuple(rows[0]) != CSV_HEADER:
        raise ValueError(f"{path}: unexpected header {rows[0]}")
    return [EvalRecord(m, c, float(l), k, float(v), int(n)) for m, c, l, k, v, n in rows[1:]]


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf",
            "#7f7f7f", "#bcbd22", "#e377c2")


def render_svg(records: Sequence[EvalRecord], path, metrics: Sequence[str],
               panel_by: str = "combo", title: str = "", y_label: str = "",
               dashed: Callable[[str], bool] = lambda metric: "input" in metric) -> None:
    """Line chart with lambda on the x axis, one panel per ``panel_by`` value.

    Each (method, combo, metric) triple becomes a series; metrics for which
    ``dashed`` is true are drawn dashed.
    """
    recs = [r for r in records if r.metric in metrics]
    if not recs:
        raise ValueError(f"no records for metrics {list(metrics)}")
    panels: dict[str, dict[tuple, list]] = defaultdict(lambda: defaultdict(list))
    for r in _sorted(recs):
        panels[getattr(r, panel_by)][(r.method, r.combo, r.metric)].append((r.lam, r.value))
    names = sorted(panels)
    series_keys = sorted({k for p in panels.values() for k in p})
    colour = {}
    for k in series_keys:
        label = k[0] if panel_by == "combo" else f"{k[1]} {k[2]}"
        colour.setdefault(label, _PALETTE[len(colour) % len(_PALETTE)])

    xs = [r.lam for r in recs]
    ys = [r.value for r in recs]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    pad = 0.05 * (y1 - y0) if y1 > y0 else 0.5
    y0, y1 = y0 - pad, y1 + pad

    pw, ph, ml, mt, gap = 260, 200, 55, 40, 30
    cols = min(3, len(names))
    rows = -(-len(names) // cols)
    legend_h = 18 * len(colour) + 10
    width = ml + cols * (pw + gap) + 10
    height = mt + rows * (ph + gap + 20) + legend_h
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="14">'
           f'{escape(title)}</text>']

    def sx(v, left):
        return left + (v - x0) / (x1 - x0) * pw

    def sy(v, top):
        return top + ph - (v - y0) / (y1 - y0) * ph

    for i, name in enumerate(names):
        left = ml + (i % cols) * (pw + gap)
        top = mt + (i // cols) * (ph + gap + 20)
        out.append(f'<g><rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" '
                   f'stroke="#444"/>')
        out.append(f'<text x="{left + pw / 2:.1f}" y="{top - 6}" text-anchor="middle">'
                   f'{escape(str(name))}</text>')
        for t in sorted(set(xs)):
            out.append(f'<text x="{sx(t, left):.1f}" y="{top + ph + 14}" '
                       f'text-anchor="middle">{_fmt(t)}</text>')
        for j in range(5):
            v = y0 + (y1 - y0) * j / 4
            out.append(f'<text x="{left - 4}" y="{sy(v, top) + 4:.1f}" text-anchor="end">'
                       f'{v:.3g}</text>')
        for key, pts in sorted(panels[name].items()):
            label = key[0] if panel_by == "combo" else f"{key[1]} {key[2]}"
            pts = sorted(pts)
            d = " ".join(f"{sx(a, left):.2f},{sy(b, top):.2f}" for a, b in pts)
            style = ' stroke-dasharray="5,3"' if dashed(key[2]) else ""
            out.append(f'<polyline points="{d}" fill="none" stroke="{colour[label]}" '
                       f'stroke-width="1.5"{style}/>')
        out.append("</g>")
    out.append(f'<text x="12" y="{mt + ph / 2:.1f}" transform="rotate(-90 12 {mt + ph / 2:.1f})" '
               f'text-anchor="middle">{escape(y_label)}</text>')
    ly = mt + rows * (ph + gap + 20)
    for i, (label, col) in enumerate(colour.items()):
        y = ly + 18 * i
        out.append(f'<line x1="{ml}" y1="{y}" x2="{ml + 24}" y2="{y}" stroke="{col}" '
                   f'stroke-width="2"/><text x="{ml + 30}" y="{y + 4}">{escape(label)}</text>')
    out.append("</svg>\n")
    Path(path).write_text("\n".join(out), encoding="utf-8")
