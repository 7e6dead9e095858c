"""Sliding-window model inputs over aligned speed series.

A window is identified by ``(segment, anchor)`` where ``anchor`` is the index
of the last lookback step; targets are the ``horizon`` steps after it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cpn.config import ModelConfig
from .cpn.model import Batch
from .data import DEFAULT_PERIODS, DataError, DatasetSplit, Normalizer, PeriodBins, SpeedSeries, chronological_split
from .features import DEFAULT_LAMBDA, feature_matrix
from .graph import RoadGraph, top_k_neighbors

SPLITS = ("train", "validation", "test")


@dataclass
class WindowSet:
    segment_ids: list[str]
    start: object
    interval_min: int
    speeds: np.ndarray        # (S, L) km/h, NaN where missing
    normalized: np.ndarray    # (S, L), NaN replaced by 0
    clock: np.ndarray         # (L, 2) sin/cos time of day
    features: np.ndarray      # (S, L, 6) raw causal features
    neighbors: np.ndarray     # (S, K) neighbor rows (0 where padded)
    weights: np.ndarray       # (S, K)
    valid: np.ndarray         # (S, K) bool
    split: DatasetSplit
    normalizer: Normalizer
    config: ModelConfig
    windows: dict             # split -> (n, 2) int array of (segment, anchor)

    @property
    def event_mask(self) -> np.ndarray:
        return (self.features[:, :, 1] > 0).astype(np.float64)

    def batch(self, pairs, with_targets: bool = True) -> Batch:
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        T, H = self.config.lookback, self.config.horizon
        seg, anc = pairs[:, 0], pairs[:, 1]
        rows = anc[:, None] + np.arange(-T + 1, 1)[None, :]             # n,T
        x = np.stack([self.normalized[seg[:, None], rows],
                      self.clock[rows, 0], self.clock[rows, 1]], axis=-1)
        nb = self.neighbors[seg]                                          # n,K
        xn = np.stack([self.normalized[nb[:, :, None], rows[:, None, :]],
                       np.broadcast_to(self.clock[rows, 0][:, None, :], nb.shape + (T,)),
                       np.broadcast_to(self.clock[rows, 1][:, None, :], nb.shape + (T,))], axis=-1)
        valid = self.valid[seg]
        xn = np.where(valid[:, :, None, None], xn, 0.0)
        E = self.features[seg[:, None], rows]
        m = (E[:, :, 1] > 0).astype(np.float64)
        y = None
        if with_targets:
            trows = anc[:, None] + np.arange(1, H + 1)[None, :]
            y = self.normalizer.apply(self.speeds[seg[:, None], trows])
        return Batch(x, xn, self.weights[seg], valid, E, m, y, m.any(axis=1))

    def targets_kmh(self, pairs) -> np.ndarray:
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        trows = pairs[:, 1:2] + np.arange(1, self.config.horizon + 1)[None, :]
        return self.speeds[pairs[:, 0:1], trows]

    def times(self, anchor: int):
        from datetime import timedelta
        return self.start + timedelta(minutes=int(anchor) * self.interval_min)


def _clock(start, interval_min: int, n: int) -> np.ndarray:
    minutes = start.hour * 60 + start.minute + np.arange(n) * interval_min
    ang = 2 * math.pi * (minutes % 1440) / 1440.0
    return np.stack([np.sin(ang), np.cos(ang)], axis=1)


def build_windows(series: list[SpeedSeries], records, ckb, graph: RoadGraph | None,
                  cfg: ModelConfig, lam: float = DEFAULT_LAMBDA,
                  periods: PeriodBins = DEFAULT_PERIODS,
                  fractions=(0.70, 0.15, 0.15)) -> WindowSet:
    """Split chronologically, fit the normalizer on training steps and list
    every window whose inputs and targets are free of missing speeds."""
    if not series:
        raise DataError("no speed series")
    s0 = series[0]
    for s in series:
        if s.start != s0.start or s.interval_min != s0.interval_min or len(s) != len(s0):
            raise DataError(f"segment {s.segment_id} is not on the common time grid")
    ids = [s.segment_id for s in series]
    L = len(s0)
    T, H, K = cfg.lookback, cfg.horizon, cfg.neighbors
    split = chronological_split(L, T, H, fractions)
    speeds = np.vstack([s.speeds for s in series])
    norm = Normalizer.fit(speeds[:, :split.train_raw_end])
    normalized = np.nan_to_num(norm.apply(speeds), nan=0.0)

    index = {s: i for i, s in enumerate(ids)}
    nbr = np.zeros((len(ids), K), dtype=np.int64)
    wts = np.zeros((len(ids), K))
    valid = np.zeros((len(ids), K), dtype=bool)
    if graph is not None and K > 0:
        for i, sid in enumerate(ids):
            if sid not in graph.index:
                continue
            lst = [(n, w) for n, w in top_k_neighbors(graph, sid, K) if n in index]
            for j, (n, w) in enumerate(lst):
                nbr[i, j], wts[i, j], valid[i, j] = index[n], w, True

    feats = feature_matrix(ids, s0.start, s0.interval_min, L, records, ckb, lam, periods)
    missing = np.isnan(speeds)
    cum = np.concatenate([np.zeros((len(ids), 1)), np.cumsum(missing, axis=1)], axis=1)
    windows = {}
    for name in SPLITS:
        anchors = np.arange(getattr(split, name).start, getattr(split, name).stop)
        lo, hi = anchors - T + 1, anchors + H + 1
        bad = cum[:, hi] - cum[:, lo] > 0                                  # S, n
        seg_i, a_i = np.nonzero(~bad)
        windows[name] = np.stack([seg_i, anchors[a_i]], axis=1)
    return WindowSet(ids, s0.start, s0.interval_min, speeds, normalized,
                     _clock(s0.start, s0.interval_min, L), feats, nbr, wts, valid,
                     split, norm, cfg, windows)
