"""Per-step causal feature vectors built from active events and effect priors.

Each vector has six entries, in this order::

    adjustment              sum of decayed, score-weighted effects (km/h)
    event_count             number of active events
    time_since_last         minutes since the most recent active onset, capped at 1440
    confidence              largest prior confidence among active events
    severity_max            largest severity score (0 when nothing is active)
    capacity_reduction_sum  summed capacity reduction of active events

An event is active from its onset until ``expected_duration_min + 3 * lam``
minutes later (inclusive).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from datetime import datetime, timedelta
from typing import Iterable, Sequence

import numpy as np

from .data import DEFAULT_PERIODS, PeriodBins
from .events.records import EventRecord

FEATURE_NAMES = ("adjustment", "event_count", "time_since_last", "confidence",
                 "severity_max", "capacity_reduction_sum")
D_C = len(FEATURE_NAMES)
SINCE_CAP = 1440.0
NEUTRAL = np.array([0.0, 0.0, SINCE_CAP, 0.0, 0.0, 0.0])
DEFAULT_LAMBDA = 30.0
ACTIVE_MARGIN = 3.0


@dataclass(frozen=True)
class ActiveEvent:
    record: EventRecord
    elapsed: float  # minutes since onset

    def __post_init__(self):
        if self.elapsed < 0:
            raise ValueError("elapsed time must be non-negative")


def temporal_decay(dt, lam: float = DEFAULT_LAMBDA):
    """``exp(-dt / lam)``."""
    if not lam > 0:
        raise ValueError("lambda must be positive")
    if np.any(np.asarray(dt) < 0):
        raise ValueError("elapsed time must be non-negative")
    return np.exp(-np.asarray(dt, dtype=np.float64) / lam) if np.ndim(dt) else math.exp(-dt / lam)


def event_weights(record: EventRecord) -> tuple[float, float]:
    """Severity and danger multipliers; a score of 3 is neutral."""
    return record.severity / 3.0, record.danger / 3.0


def active_span(record: EventRecord, lam: float = DEFAULT_LAMBDA) -> float:
    return record.expected_duration_min + ACTIVE_MARGIN * lam


def active_events(records: Iterable[EventRecord], when: datetime, lam: float = DEFAULT_LAMBDA,
                  segment: str | None = None) -> list[ActiveEvent]:
    out = []
    for r in records:
        if segment is not None and r.segment_id != segment:
            continue
        dt = (when - r.onset).total_seconds() / 60.0
        if 0 <= dt <= active_span(r, lam):
            out.append(ActiveEvent(r, dt))
    return out


def causal_adjustment(active: Sequence[ActiveEvent], ckb, lam: float, t: datetime,
                      periods: PeriodBins = DEFAULT_PERIODS) -> float:
    """Sum over active events of decay * severity weight * danger weight * prior effect.

    The prior for each event is looked up under the period of ``t``;
    unknown groups contribute nothing.
    """
    period = periods.of(t)
    total = 0.0
    for a in active:
        tau, _ = ckb.query(a.record.event_type, period)
        ws, wd = event_weights(a.record)
        total += temporal_decay(a.elapsed, lam) * ws * wd * tau
    return total


def feature_vector(active: Sequence[ActiveEvent], ckb, lam: float, t: datetime,
                   periods: PeriodBins = DEFAULT_PERIODS) -> np.ndarray:
    if not active:
        return NEUTRAL.copy()
    period = periods.of(t)
    conf = max(ckb.query(a.record.event_type, period)[1] for a in active)
    return np.array([
        causal_adjustment(active, ckb, lam, t, periods),
        float(len(active)),
        min(SINCE_CAP, min(a.elapsed for a in active)),
        conf,
        float(max(a.record.severity for a in active)),
        sum(a.record.capacity_reduction for a in active),
    ])


@dataclass(frozen=True)
class CausalFeatureSequence:
    segment_id: str
    times: tuple[datetime, ...]
    values: np.ndarray  # (T, 6)

    @property
    def mask(self) -> np.ndarray:
        """1.0 where at least one event is active."""
        return (self.values[:, 1] > 0).astype(np.float64)


def build_feature_sequence(segment: str, events: Iterable[EventRecord], ckb,
                           times: Sequence[datetime], lam: float = DEFAULT_LAMBDA,
                           periods: PeriodBins = DEFAULT_PERIODS) -> CausalFeatureSequence:
    """One feature vector per instant in ``times`` for ``segment``."""
    evs = [r for r in events if r.segment_id == segment]
    vals = np.vstack([feature_vector(active_events(evs, t, lam), ckb, lam, t, periods)
                      for t in times]) if times else np.zeros((0, D_C))
    vals.flags.writeable = False
    return CausalFeatureSequence(segment, tuple(times), vals)


def feature_matrix(segment_ids: Sequence[str], start: datetime, interval_min: float, n_steps: int,
                   records: Iterable[EventRecord], ckb, lam: float = DEFAULT_LAMBDA,
                   periods: PeriodBins = DEFAULT_PERIODS) -> np.ndarray:
    """Feature vectors for every segment and grid step, shape ``(S, n_steps, 6)``.

    Same values as :func:`build_feature_sequence` on the grid, computed
    event by event over the steps each one is active.
    """
    index = {s: i for i, s in enumerate(segment_ids)}
    out = np.zeros((len(segment_ids), n_steps, D_C))
    since = np.full((len(segment_ids), n_steps), np.inf)
    clock0 = start.hour * 60 + start.minute + start.second / 60.0
    step_minutes = clock0 + np.arange(n_steps) * interval_min
    step_period = np.array([periods.of(int(m // 1) % 1440) for m in step_minutes])
    prior_cache: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def priors(etype):
        if etype not in prior_cache:
            lut = {p: ckb.query(etype, p) for p in set(step_period)}
            prior_cache[etype] = (np.array([lut[p][0] for p in step_period]),
                                  np.array([lut[p][1] for p in step_period]))
        return prior_cache[etype]

    for r in records:
        i = index.get(r.segment_id)
        if i is None:
            continue
        kf = (r.onset - start).total_seconds() / 60.0 / interval_min
        k_lo = max(0, math.ceil(kf - 1e-9))
        span = active_span(r, lam)
        k_hi = min(n_steps - 1, math.floor(kf + span / interval_min + 1e-9))
        if k_lo > k_hi:
            continue
        ks = np.arange(k_lo, k_hi + 1)
        dt = np.maximum((ks - kf) * interval_min, 0.0)
        tau, conf = priors(r.event_type)
        ws, wd = event_weights(r)
        out[i, ks, 0] += np.exp(-dt / lam) * ws * wd * tau[ks]
        out[i, ks, 1] += 1.0
        since[i, ks] = np.minimum(since[i, ks], dt)
        out[i, ks, 3] = np.maximum(out[i, ks, 3], conf[ks])
        out[i, ks, 4] = np.maximum(out[i, ks, 4], r.severity)
        out[i, ks, 5] += r.capacity_reduction
    out[:, :, 2] = np.minimum(since, SINCE_CAP)
    return out


def write_feature_csv(path, segment_ids: Sequence[str], start: datetime, interval_min: float,
                      feats: np.ndarray) -> None:
    """One row per (segment, step) with the six named columns."""
    step = timedelta(minutes=interval_min)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(("segment_id", "timestamp_iso8601", *FEATURE_NAMES))
        for i, sid in enumerate(segment_ids):
            for k in range(feats.shape[1]):
                w.writerow((sid, (start + k * step).isoformat(), *(repr(float(v)) for v in feats[i, k])))
