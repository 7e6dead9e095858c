"""Speed series ingest, chronological splitting, normalization and a
synthetic generator with injected, recorded event effects."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.signal import lfilter

from .events.records import (
    DISPLAY_NAMES,
    EVENT_TYPES,
    EventRecord,
    RawEventText,
    duration_score,
    write_jsonl,
)

log = logging.getLogger(__name__)

CSV_HEADER = ("timestamp_iso8601", "segment_id", "speed_kmh")
MAX_SPEED = 200.0
AR_COEF = 0.8
PERIODS = ("MorningPeak", "EveningPeak", "OffPeak", "Night")


class DataError(ValueError):
    pass


# --------------------------------------------------------------------------
# time-of-day periods

@dataclass(frozen=True)
class PeriodBins:
    """Named clock-time ranges in minutes since midnight, ``[start, end)``.

    A range whose start exceeds its end wraps past midnight. Minutes not in
    any range fall into ``default``.
    """

    bins: tuple[tuple[str, int, int], ...] = (
        ("MorningPeak", 7 * 60, 10 * 60),
        ("EveningPeak", 17 * 60, 20 * 60),
        ("Night", 23 * 60, 5 * 60),
    )
    default: str = "OffPeak"

    def of(self, when) -> str:
        minute = when.hour * 60 + when.minute if isinstance(when, datetime) else int(when) % 1440
        for name, lo, hi in self.bins:
            if (lo <= minute < hi) if lo < hi else (minute >= lo or minute < hi):
                return name
        return self.default

    def to_dict(self) -> dict:
        return {"bins": [list(b) for b in self.bins], "default": self.default}

    @classmethod
    def from_dict(cls, d: dict) -> "PeriodBins":
        return cls(tuple((str(n), int(a), int(b)) for n, a, b in d["bins"]), d.get("default", "OffPeak"))


DEFAULT_PERIODS = PeriodBins()


def time_period(when, bins: PeriodBins = DEFAULT_PERIODS) -> str:
    return bins.of(when)


# --------------------------------------------------------------------------
# speed series

@dataclass(frozen=True)
class Gap:
    start: int
    length: int
    filled: bool


@dataclass(frozen=True, eq=False)
class SpeedSeries:
    """Speeds (km/h) of one segment on a fixed time grid.

    Unfilled gaps are NaN; windows touching them are skipped downstream.
    """

    segment_id: str
    start: datetime
    interval_min: int
    speeds: np.ndarray
    gaps: tuple[Gap, ...] = ()

    def __post_init__(self):
        s = np.asarray(self.speeds, dtype=np.float64)
        ok = np.isnan(s) | ((s >= 0) & (s <= MAX_SPEED))
        if not ok.all():
            raise DataError(f"segment {self.segment_id}: speed out of [0, {MAX_SPEED}]")
        if self.interval_min <= 0:
            raise DataError("interval must be positive")
        s.flags.writeable = False
        object.__setattr__(self, "speeds", s)

    def __len__(self) -> int:
        return len(self.speeds)

    @property
    def timestamps(self) -> list[datetime]:
        step = timedelta(minutes=self.interval_min)
        return [self.start + i * step for i in range(len(self))]

    def time_at(self, idx: int) -> datetime:
        return self.start + timedelta(minutes=self.interval_min * int(idx))

    def index_of(self, when: datetime) -> float:
        """Fractional grid index of ``when``."""
        return (when - self.start).total_seconds() / 60.0 / self.interval_min


def _fill_gaps(values: np.ndarray, max_gap: int) -> tuple[np.ndarray, list[Gap]]:
    out = values.copy()
    gaps = []
    isnan = np.isnan(values)
    i, n = 0, len(values)
    while i < n:
        if not isnan[i]:
            i += 1
            continue
        j = i
        while j < n and isnan[j]:
            j += 1
        length = j - i
        fillable = length <= max_gap and i > 0 and j < n
        if fillable:
            lo, hi = values[i - 1], values[j]
            frac = np.arange(1, length + 1) / (length + 1)
            out[i:j] = lo + (hi - lo) * frac
        gaps.append(Gap(i, length, fillable))
        i = j
    return out, gaps


def load_speed_csv(path, max_gap: int = 3) -> list[SpeedSeries]:
    """Read ``timestamp_iso8601,segment_id,speed_kmh`` rows.

    Empty speed cells and absent grid rows are gaps. Gaps of at most
    ``max_gap`` steps are linearly interpolated; longer ones stay NaN and are
    listed in each series' ``gaps``.
    """
    per_seg: dict[str, dict[datetime, float]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise DataError(f"{path}: header must be {','.join(CSV_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            ts_raw, seg, sp_raw = (c.strip() for c in row)
            try:
                ts = datetime.fromisoformat(ts_raw)
                sp = float(sp_raw) if sp_raw else math.nan
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if not math.isnan(sp) and not 0.0 <= sp <= MAX_SPEED:
                raise DataError(f"{path}:{lineno}: speed {sp} outside [0, {MAX_SPEED}]")
            rows = per_seg.setdefault(seg, {})
            if ts in rows:
                raise DataError(f"{path}:{lineno}: duplicate timestamp for segment {seg}")
            rows[ts] = sp
    if not per_seg:
        raise DataError(f"{path}: no data rows")

    diffs = set()
    for rows in per_seg.values():
        ts = sorted(rows)
        diffs.update(int((b - a).total_seconds()) for a, b in zip(ts, ts[1:]))
    if not diffs:
        raise DataError(f"{path}: need at least two timestamps per segment")
    step = min(diffs)
    if step <= 0 or step % 60 or any(d % step for d in diffs):
        raise DataError(f"{path}: timestamps are not on a constant-spacing grid")

    out = []
    for seg, rows in per_seg.items():
        ts = sorted(rows)
        n = int((ts[-1] - ts[0]).total_seconds()) // step + 1
        vals = np.full(n, math.nan)
        for t in ts:
            vals[int((t - ts[0]).total_seconds()) // step] = rows[t]
        filled, gaps = _fill_gaps(vals, max_gap)
        for g in gaps:
            log.info("segment %s: gap of %d steps at %d (%s)", seg, g.length, g.start,
                     "interpolated" if g.filled else "excluded")
        out.append(SpeedSeries(seg, ts[0], step // 60, filled, tuple(gaps)))
    return out


def write_speed_csv(path, series: Iterable[SpeedSeries]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for s in series:
            for t, v in zip(s.timestamps, s.speeds):
                w.writerow([t.isoformat(), s.segment_id, "" if math.isnan(v) else repr(float(v))])


# --------------------------------------------------------------------------
# splitting and normalization

@dataclass(frozen=True)
class DatasetSplit:
    """Window anchors (index of the last lookback step) per split.

    Targets of different splits are disjoint and no window sees a later
    split's targets; the last ``horizon - 1`` anchors before each boundary
    are dropped to guarantee it.
    """

    train: range
    validation: range
    test: range
    lookback: int
    horizon: int

    def targets(self, part: str) -> range:
        r = getattr(self, part)
        return range(r.start + 1, r.stop + self.horizon)

    @property
    def train_raw_end(self) -> int:
        """Exclusive end of the raw indices available to fit statistics."""
        return self.train.stop + self.horizon


def chronological_split(series_length: int, lookback: int, horizon: int,
                        fractions: Sequence[float] = (0.70, 0.15, 0.15)) -> DatasetSplit:
    if lookback < 1 or horizon < 1:
        raise DataError("lookback and horizon must be positive")
    if series_length < lookback + horizon + 10:
        raise DataError(f"series of length {series_length} too short for T={lookback}, H={horizon}")
    n_windows = series_length - lookback - horizon + 1
    gap = horizon - 1
    usable = n_windows - 2 * gap
    if usable < 3:
        raise DataError(f"series of length {series_length} leaves {usable} usable windows")
    n_train = int(round(fractions[0] * usable))
    n_val = int(round(fractions[1] * usable))
    n_val = max(n_val, 1)
    n_test = usable - n_train - n_val
    if n_test < 1:
        n_train -= 1 - n_test
        n_test = 1
    first = lookback - 1
    train = range(first, first + n_train)
    val = range(train.stop + gap, train.stop + gap + n_val)
    test = range(val.stop + gap, val.stop + gap + n_test)
    return DatasetSplit(train, val, test, lookback, horizon)


@dataclass(frozen=True)
class Normalizer:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise DataError("normalizer std must be positive")

    @classmethod
    def fit(cls, values) -> "Normalizer":
        v = np.asarray(values, dtype=np.float64)
        v = v[~np.isnan(v)]
        return cls(float(v.mean()), float(v.std()))

    def apply(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def inverse(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean


# --------------------------------------------------------------------------
# synthetic generator

DEFAULT_PROFILE = (
    62, 64, 65, 65, 64, 60, 52, 38, 34, 42, 50, 53,
    52, 52, 51, 49, 44, 36, 33, 40, 48, 54, 58, 60,
)


@dataclass
class SyntheticSpec:
    """Parameters for :func:`generate_synthetic`.

    ``injected_effects`` maps ``event_type -> period -> tau`` (km/h at onset);
    absent keys inject nothing.
    """

    segment_count: int = 10
    timestep_minutes: int = 4
    horizon_days: int = 7
    base_daily_profile: tuple[float, ...] = DEFAULT_PROFILE
    noise_std: float = 3.0
    injected_effects: dict = field(default_factory=dict)
    event_rate: float = 1.5
    decay_constant: float = 30.0
    random_seed: int = 0
    event_types: tuple[str, ...] = EVENT_TYPES
    duration_range_min: tuple[int, int] = (32, 96)
    segment_scale_range: tuple[float, float] = (0.8, 1.2)
    start: str = "2024-01-01T00:00:00"
    periods: PeriodBins = DEFAULT_PERIODS
    # extra events at fixed places: {"segment": int, "step": int, "type": str, "duration_min": float}
    scheduled_events: tuple = ()

    def validate(self) -> None:
        if self.segment_count < 1 or self.horizon_days < 1:
            raise DataError("segment_count and horizon_days must be positive")
        if self.timestep_minutes < 1 or 1440 % self.timestep_minutes:
            raise DataError("timestep_minutes must divide a day")
        if len(self.base_daily_profile) != 24:
            raise DataError("base_daily_profile needs 24 hourly values")
        if self.noise_std < 0 or self.event_rate < 0:
            raise DataError("noise_std and event_rate must be non-negative")
        if not self.decay_constant > 0:
            raise DataError("decay_constant must be positive")
        lo, hi = self.duration_range_min
        if not 0 < lo <= hi:
            raise DataError("bad duration_range_min")
        for et, per in self.injected_effects.items():
            if et not in EVENT_TYPES:
                raise DataError(f"unknown event type {et!r} in injected_effects")
            for p in per:
                if p not in PERIODS:
                    raise DataError(f"unknown period {p!r} in injected_effects")
        if not set(self.event_types) <= set(EVENT_TYPES) or not self.event_types:
            raise DataError("event_types must be a non-empty subset of the known types")
        for e in self.scheduled_events:
            if e.get("type") not in EVENT_TYPES or not 0 <= int(e.get("segment", -1)) < self.segment_count:
                raise DataError(f"bad scheduled event {e!r}")
            if not float(e.get("duration_min", 0)) > 0:
                raise DataError(f"scheduled event needs a positive duration: {e!r}")

    def tau(self, event_type: str, period: str) -> float:
        return float(self.injected_effects.get(event_type, {}).get(period, 0.0))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["periods"] = self.periods.to_dict()
        d["base_daily_profile"] = list(self.base_daily_profile)
        d["event_types"] = list(self.event_types)
        d["duration_range_min"] = list(self.duration_range_min)
        d["segment_scale_range"] = list(self.segment_scale_range)
        d["scheduled_events"] = [dict(e) for e in self.scheduled_events]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        if "periods" in d:
            d["periods"] = PeriodBins.from_dict(d["periods"])
        for k in ("base_daily_profile", "event_types", "duration_range_min", "segment_scale_range",
                  "scheduled_events"):
            if k in d:
                d[k] = tuple(d[k])
        known = cls.__dataclass_fields__
        unknown = set(d) - set(known)
        if unknown:
            raise DataError(f"unknown synthetic spec fields: {sorted(unknown)}")
        spec = cls(**d)
        spec.validate()
        return spec

    @classmethod
    def load(cls, path) -> "SyntheticSpec":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class LedgerEntry:
    event_id: str
    type: str
    onset: str
    duration_min: float
    tau_true: float
    time_period: str
    segment_id: str


@dataclass
class SyntheticDataset:
    series: list[SpeedSeries]
    records: list[EventRecord]
    ledger: list[LedgerEntry]
    raw_events: list[RawEventText]
    edges: list[tuple[str, str, float]]
    spec: SyntheticSpec

    def effect_matrix(self) -> np.ndarray:
        """Injected effect (km/h) per segment and step, shape (segments, steps)."""
        return injected_effects(self.series, self.ledger, self.spec)


def scores_for_effect(tau: float) -> int:
    """Monotone map from |tau| to a 1-5 score: 1 + round(|tau| / 5), clipped."""
    return int(min(5, max(1, 1 + round(abs(tau) / 5.0))))


def _daily_profile(profile: Sequence[float], minutes: np.ndarray) -> np.ndarray:
    hours = np.arange(25) * 60.0
    vals = np.append(np.asarray(profile, dtype=float), profile[0])
    return np.interp(minutes % 1440, hours, vals)


def injected_effects(series, ledger, spec) -> np.ndarray:
    idx = {s.segment_id: i for i, s in enumerate(series)}
    n = len(series[0]) if series else 0
    out = np.zeros((len(series), n))
    ts = spec.timestep_minutes
    start = datetime.fromisoformat(spec.start)
    for e in ledger:
        k0 = int(round((datetime.fromisoformat(e.onset) - start).total_seconds() / 60 / ts))
        steps = int(round(e.duration_min / ts))
        k1 = min(n, k0 + steps)
        dt = np.arange(k1 - k0) * ts
        out[idx[e.segment_id], k0:k1] += e.tau_true * np.exp(-dt / spec.decay_constant)
    return out


_TEXT_TEMPLATES = {
    "Accident": ("minor fender-bender on the shoulder", "accident, lane closed",
                 "multi-vehicle accident, lanes closed", "serious multi-vehicle crash, injuries",
                 "major pile-up, all lanes closed"),
    "Construction": ("short roadwork on the shoulder", "roadwork, lane closed",
                     "construction, lanes closed", "major construction, lanes closed",
                     "construction, all lanes closed"),
    "Hazard": ("small debris on the shoulder", "debris on road", "fog, reduced visibility",
               "flooding, lanes closed", "severe flooding, all lanes closed"),
    "RoadClosure": ("brief road closure", "road closed", "road closed, detour",
                    "road closed for hours", "road closed, all lanes closed"),
    "TrafficControl": ("traffic control, shoulder", "police traffic control",
                       "traffic control, lane closed", "traffic control, lanes closed",
                       "traffic control, all lanes closed"),
}


def generate_synthetic(spec: SyntheticSpec) -> SyntheticDataset:
    """Profile + AR(1) noise + decaying event effects, fully recorded.

    Speed of segment ``i`` at step ``k``::

        scale_i * profile(clock(k)) + noise_i(k)
            + sum_events tau * exp(-(k - onset) * dt / decay)   while active

    Events are placed on the time grid with Poisson counts per segment;
    slower segments see proportionally more events. Each event is active for
    a duration drawn from ``duration_range_min``.
    """
    spec.validate()
    rng = np.random.default_rng(spec.random_seed)
    ts = spec.timestep_minutes
    steps = spec.horizon_days * 1440 // ts
    start = datetime.fromisoformat(spec.start)
    minutes = np.arange(steps) * ts + (start.hour * 60 + start.minute)
    base = _daily_profile(spec.base_daily_profile, minutes)
    lo_s, hi_s = spec.segment_scale_range
    scales = rng.uniform(lo_s, hi_s, spec.segment_count)
    seg_ids = [f"S{i}" for i in range(spec.segment_count)]

    noise = np.zeros((spec.segment_count, steps))
    if spec.noise_std > 0:
        z = rng.standard_normal((spec.segment_count, steps))
        u = z * spec.noise_std * math.sqrt(1 - AR_COEF ** 2)
        u[:, 0] = z[:, 0] * spec.noise_std
        noise = lfilter([1.0], [1.0, -AR_COEF], u, axis=1)

    ledger: list[LedgerEntry] = []
    records: list[EventRecord] = []
    raws: list[RawEventText] = []
    span = (hi_s - lo_s) or 1.0
    dmin, dmax = (int(math.ceil(v / ts)) for v in spec.duration_range_min)
    plan: list[tuple[str, int, str, float]] = []
    for i, seg in enumerate(seg_ids):
        rate = spec.event_rate * spec.horizon_days
        if hi_s > lo_s:
            rate *= 1.0 + 0.4 * ((lo_s + hi_s) / 2 - scales[i]) / span
        n_ev = rng.poisson(rate)
        onsets = np.sort(rng.integers(0, steps, n_ev))
        types = rng.integers(0, len(spec.event_types), n_ev)
        durs = rng.integers(dmin, dmax + 1, n_ev)
        for k0, ti, dsteps in zip(onsets, types, durs):
            plan.append((seg, int(k0), spec.event_types[ti], float(dsteps * ts)))
    for e in spec.scheduled_events:
        plan.append((seg_ids[int(e["segment"])], int(e["step"]), e["type"], float(e["duration_min"])))

    for eid, (seg, k0, etype, dur_min) in enumerate(plan):
        onset = start + timedelta(minutes=k0 * ts)
        period = spec.periods.of(onset)
        tau = spec.tau(etype, period)
        sev = scores_for_effect(tau)
        ev_id = f"E{eid:06d}"
        ledger.append(LedgerEntry(ev_id, etype, onset.isoformat(), dur_min, tau, period, seg))
        records.append(EventRecord(
            event_id=ev_id, event_type=etype, onset=onset, segment_id=seg,
            severity=sev, danger=sev, duration_score=duration_score(dur_min),
            impact_scope=sev, capacity_reduction=min(1.0, abs(tau) / 20.0),
            expected_duration_min=dur_min))
        text = (f"{_TEXT_TEMPLATES[etype][sev - 1]} on segment {seg} at "
                f"{onset:%H:%M}, expected {int(dur_min)} minutes")
        raws.append(RawEventText(ev_id, text, onset, "synthetic"))

    speeds = scales[:, None] * base[None, :] + noise
    draft = [SpeedSeries(s, start, ts, np.zeros(steps)) for s in seg_ids]
    speeds = np.clip(speeds + injected_effects(draft, ledger, spec), 0.0, MAX_SPEED)
    series = [SpeedSeries(s, start, ts, speeds[i]) for i, s in enumerate(seg_ids)]

    edges = []
    n = spec.segment_count
    if n > 1:
        for i in range(n):
            for j in sorted({(i + 1) % n, (i - 1) % n} - {i}):
                edges.append((seg_ids[i], seg_ids[j], round(float(rng.uniform(0.5, 1.5)), 6)))
            extra = rng.choice(n, size=min(2, n - 1), replace=False)
            for j in extra:
                if j != i and abs(j - i) not in (1, n - 1):
                    edges.append((seg_ids[i], seg_ids[j], round(float(rng.uniform(0.1, 0.5)), 6)))
    return SyntheticDataset(series, records, ledger, raws, edges, spec)


def write_synthetic(ds: SyntheticDataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_speed_csv(out / "speeds.csv", ds.series)
    write_jsonl(out / "records.jsonl", ds.records)
    write_jsonl(out / "events.jsonl", ds.raw_events)
    (out / "ledger.json").write_text(
        json.dumps([asdict(e) for e in ds.ledger], indent=1, sort_keys=True), encoding="utf-8")
    with open(out / "edges.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(("src_id", "dst_id", "weight"))
        w.writerows(ds.edges)
    (out / "spec.json").write_text(json.dumps(ds.spec.to_dict(), indent=1, sort_keys=True),
                                   encoding="utf-8")


def read_ledger(path) -> list[LedgerEntry]:
    return [LedgerEntry(**d) for d in json.loads(Path(path).read_text(encoding="utf-8"))]


def display_name(event_type: str) -> str:
    return DISPLAY_NAMES[event_type]
