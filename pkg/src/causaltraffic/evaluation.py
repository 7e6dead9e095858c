"""Metrics on the km/h scale, causal ablations and attention exports."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .cpn.checkpoint import ModelState
from .cpn.model import Batch, forward

MAPE_FLOOR = 1.0


@dataclass(frozen=True)
class MetricReport:
    mae: float
    mse: float
    rmse: float
    mape: float
    n: int
    horizon: int = 1

    def triple(self) -> str:
        """``MAE / MSE / RMSE`` with three decimals, e.g. ``3.607 / 25.427 / 5.043``."""
        return f"{self.mae:.3f} / {self.mse:.3f} / {self.rmse:.3f}"

    def to_dict(self) -> dict:
        return asdict(self)


def metrics(y_hat, y) -> MetricReport:
    """Errors over every element; MAPE divides by ``max(|y|, 1)`` km/h."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y_hat.shape != y.shape:
        raise ValueError(f"shape mismatch: predictions {y_hat.shape} vs targets {y.shape}")
    if y.size == 0:
        raise ValueError("metrics need at least one value")
    if not (np.isfinite(y_hat).all() and np.isfinite(y).all()):
        raise ValueError("metrics need finite values")
    d = y_hat - y
    mse = float(np.mean(d * d))
    return MetricReport(
        mae=float(np.mean(np.abs(d))), mse=mse, rmse=math.sqrt(mse),
        mape=float(np.mean(np.abs(d) / np.maximum(np.abs(y), MAPE_FLOOR)) * 100),
        n=int(y.shape[0]), horizon=int(y.shape[1]) if y.ndim == 2 else 1)


@dataclass
class Predictions:
    y_hat: np.ndarray      # (n, H) km/h
    y_base: np.ndarray     # (n, H) km/h
    a_causal: np.ndarray   # (n, H) km/h deviation
    gate: float
    event: np.ndarray      # (n,) bool


def _to_kmh(normalizer, z: np.ndarray) -> np.ndarray:
    kmh = normalizer.inverse(z)
    if not np.allclose(normalizer.apply(kmh), z, rtol=0, atol=1e-9):
        raise ValueError("normalizer does not round-trip; refusing to report metrics")
    return kmh


def predict(state: ModelState, batch: Batch, neutral: bool = False) -> Predictions:
    b = batch.neutral() if neutral else batch
    with nx.no_grad():
        out = forward(state.params, state.config, b)
    norm = state.normalizer
    return Predictions(_to_kmh(norm, out.y_hat.value), _to_kmh(norm, out.y_base.value),
                       out.a_causal.value * norm.std, out.gate.item(),
                       np.asarray(batch.event, dtype=bool))


def predict_windows(state: ModelState, windows, pairs, neutral: bool = False,
                    batch_size: int = 2048) -> Predictions:
    parts = [predict(state, windows.batch(pairs[i:i + batch_size]), neutral)
             for i in range(0, len(pairs), batch_size)]
    if not parts:
        raise ValueError("no windows to predict")
    cat = lambda name: np.concatenate([getattr(p, name) for p in parts])
    return Predictions(cat("y_hat"), cat("y_base"), cat("a_causal"), parts[0].gate, cat("event"))


@dataclass
class AblationReport:
    causal: MetricReport
    neutral: MetricReport
    events_causal: MetricReport | None = None
    events_neutral: MetricReport | None = None

    @staticmethod
    def _delta(on: MetricReport, off: MetricReport) -> dict:
        pct = lambda a, b: 0.0 if a == b else (a - b) / b * 100 if b else math.inf
        return {k: pct(getattr(on, k), getattr(off, k)) for k in ("mae", "mse", "rmse", "mape")}

    @property
    def delta_pct(self) -> dict:
        """Relative change of each metric when causal features are switched on."""
        return self._delta(self.causal, self.neutral)

    def to_dict(self) -> dict:
        d = {"causal": self.causal.to_dict(), "neutral": self.neutral.to_dict(),
             "delta_pct": self.delta_pct}
        if self.events_causal is not None:
            d["events"] = {"causal": self.events_causal.to_dict(),
                           "neutral": self.events_neutral.to_dict(),
                           "delta_pct": self._delta(self.events_causal, self.events_neutral)}
        return d


def ablation_compare(state: ModelState, windows, pairs) -> tuple[AblationReport, Predictions]:
    """Same windows evaluated with real and with neutral causal features."""
    y = windows.targets_kmh(pairs)
    on = predict_windows(state, windows, pairs)
    off = predict_windows(state, windows, pairs, neutral=True)
    rep = AblationReport(metrics(on.y_hat, y), metrics(off.y_hat, y))
    if on.event.any():
        rep.events_causal = metrics(on.y_hat[on.event], y[on.event])
        rep.events_neutral = metrics(off.y_hat[on.event], y[on.event])
    return rep, on


def sign_agreement(a_causal, effect, mask=None) -> tuple[float, int]:
    """Share of windows where the horizon-mean adjustment has the sign of the
    horizon-mean reference effect; windows with zero effect are skipped."""
    a = np.asarray(a_causal, dtype=np.float64)
    e = np.asarray(effect, dtype=np.float64)
    if a.ndim == 2:
        a = a.mean(axis=1)
    if e.ndim == 2:
        e = e.mean(axis=1)
    keep = e != 0
    if mask is not None:
        keep &= np.asarray(mask, dtype=bool)
    n = int(keep.sum())
    if n == 0:
        return math.nan, 0
    return float(np.mean(np.sign(a[keep]) == np.sign(e[keep]))), n


def write_predictions_csv(path, windows, pairs, preds: Predictions) -> None:
    """Per-window predictions, targets and residuals (for scatter plots)."""
    y = windows.targets_kmh(pairs)
    H = y.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["segment_id", "anchor_time", "event"]
                   + [f"{n}_{h + 1}" for n in ("y_hat", "y_base", "a_causal", "y") for h in range(H)]
                   + ["y_hat_mean", "y_mean", "residual_mean"])
        for i, (s, k) in enumerate(pairs):
            row = [windows.segment_ids[s], windows.times(k).isoformat(), int(preds.event[i])]
            for arr in (preds.y_hat, preds.y_base, preds.a_causal, y):
                row += [f"{v:.6f}" for v in arr[i]]
            row += [f"{preds.y_hat[i].mean():.6f}", f"{y[i].mean():.6f}",
                    f"{(y[i] - preds.y_hat[i]).mean():.6f}"]
            w.writerow(row)


# -- attention ----------------------------------------------------------------

def attention_maps(state: ModelState, batch: Batch) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mean and variance over the batch of the head-averaged last-block map,
    plus a boolean map of the cells the mask leaves open."""
    with nx.no_grad():
        out = forward(state.params, state.config, batch)
    maps = out.attention_map
    T = maps.shape[-1]
    return maps.mean(axis=0), maps.var(axis=0), np.tril(np.ones((T, T), dtype=bool))


def write_matrix_csv(path, mat: np.ndarray, open_cells: np.ndarray) -> None:
    T = mat.shape[0]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"s{s}" for s in range(T)])
        for t in range(T):
            w.writerow([t] + [repr(float(mat[t, s])) if open_cells[t, s] else "" for s in range(T)])


def heatmap_svg(mat: np.ndarray, open_cells: np.ndarray, title: str, cell: int = 24) -> str:
    """Grey-to-blue heatmap; masked cells are left white with a light outline."""
    T = mat.shape[0]
    vals = mat[open_cells]
    lo, hi = (float(vals.min()), float(vals.max())) if vals.size else (0.0, 1.0)
    span = hi - lo or 1.0
    pad, top = 40, 40
    size = pad + T * cell + 10
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size + top - pad}" '
           f'font-family="sans-serif" font-size="10">',
           f'<text x="{pad}" y="16" font-size="13">{title}</text>',
           f'<text x="{pad}" y="30">key step s (columns) vs query step t (rows); '
           f'range {lo:.4g} to {hi:.4g}</text>']
    for t in range(T):
        out.append(f'<text x="{pad - 4}" y="{top + t * cell + cell * 0.65:.1f}" text-anchor="end">{t}</text>')
        for s in range(T):
            x, y = pad + s * cell, top + t * cell
            if open_cells[t, s]:
                u = (float(mat[t, s]) - lo) / span
                r, g, b = (int(round(240 - u * (240 - c))) for c in (8, 48, 107))
                out.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="rgb({r},{g},{b})"/>')
            else:
                out.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="white" '
                           f'stroke="#eee"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def export_attention(state: ModelState, batch: Batch, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mean, var, open_cells = attention_maps(state, batch)
    paths = {}
    for name, mat, title in (("mean", mean, "Average attention map"),
                             ("variance", var, "Attention variance map")):
        csv_path, svg_path = out / f"attention_{name}.csv", out / f"attention_{name}.svg"
        write_matrix_csv(csv_path, mat, open_cells)
        svg_path.write_text(heatmap_svg(mat, open_cells, f"{title} (n={len(batch)})"), encoding="utf-8")
        paths[f"{name}_csv"], paths[f"{name}_svg"] = csv_path, svg_path
    return paths


def read_matrix_csv(path) -> np.ndarray:
    """Inverse of :func:`write_matrix_csv`; empty cells come back as NaN."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[float(v) if v else np.nan for v in r[1:]] for r in rows])
