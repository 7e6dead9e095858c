"""Assemble treated/control observation rows from speeds and events and
estimate one matched-pair effect per (event type, time period) group."""

from __future__ import annotations

import hashlib
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from datetime import timedelta

import numpy as np

from ..data import DEFAULT_PERIODS, DataError, PeriodBins, SpeedSeries
from ..events.records import EVENT_TYPES, EventRecord
from .matching import NoMatchesError, estimate_ate, match_pairs
from .propensity import fit_propensity
from .store import AteEntry, CausalKnowledgeBase

log = logging.getLogger(__name__)

CONFOUNDERS = ("hour_sin", "hour_cos", "is_weekend", "baseline_speed_percentile")


@dataclass
class CkbConfig:
    """Knobs for :func:`build_ckb`.

    The outcome of a unit starting at step ``k`` on a segment is the mean
    speed over ``outcome_window_min`` minus the mean at the same clock time
    on the nearest comparable event-free day. With ``decay_normalize`` it is
    divided by the mean of ``exp(-dt / decay_minutes)`` over the window, so
    the estimate is on the scale of the onset effect.
    """

    caliper: float = 0.2
    caliper_mode: str = "logit_sd"     # or "absolute" (probability scale)
    min_matches: int = 30
    outcome_window_min: float = 30.0
    decay_minutes: float = 30.0
    decay_normalize: bool = True
    activity_margin: float = 3.0       # events stay active for duration + margin * decay
    control_ratio: float = 4.0
    seed: int = 0
    periods: PeriodBins = DEFAULT_PERIODS

    def validate(self):
        if not self.caliper > 0:
            raise ValueError("caliper must be positive")
        if self.caliper_mode not in ("logit_sd", "absolute"):
            raise ValueError("caliper_mode must be 'logit_sd' or 'absolute'")
        if self.min_matches < 1:
            raise ValueError("min_matches must be at least 1")
        if not (self.outcome_window_min > 0 and self.decay_minutes > 0 and self.control_ratio > 0):
            raise ValueError("window, decay and control ratio must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["periods"] = self.periods.to_dict()
        return d


@dataclass
class BuildReport:
    groups: dict = field(default_factory=dict)       # key -> counts
    omitted: dict = field(default_factory=dict)      # key -> reason
    excluded_events: dict = field(default_factory=dict)  # reason -> count

    def lines(self) -> list[str]:
        out = []
        for (t, p), g in sorted(self.groups.items()):
            out.append(f"{t}/{p}: treated={g['n_treated']} controls={g['n_control']} "
                       f"matched={g.get('n_matched', 0)}")
        for (t, p), why in sorted(self.omitted.items()):
            out.append(f"omitted {t}/{p}: {why}")
        for why, n in sorted(self.excluded_events.items()):
            out.append(f"excluded {n} events: {why}")
        return out

    def to_dict(self) -> dict:
        return {"groups": {f"{t}/{p}": g for (t, p), g in self.groups.items()},
                "omitted": {f"{t}/{p}": r for (t, p), r in self.omitted.items()},
                "excluded_events": dict(self.excluded_events)}


def data_hash(series, records) -> str:
    h = hashlib.sha256()
    for s in series:
        h.update(s.segment_id.encode())
        h.update(s.start.isoformat().encode())
        h.update(np.ascontiguousarray(s.speeds).tobytes())
    for r in sorted(records, key=lambda r: r.event_id):
        h.update(repr(sorted(r.to_dict().items())).encode())
    return h.hexdigest()


class _Grid:
    """Aligned speed matrix plus event-activity counts."""

    def __init__(self, series: list[SpeedSeries], records, cfg: CkbConfig):
        s0 = series[0]
        for s in series:
            if s.start != s0.start or s.interval_min != s0.interval_min or len(s) != len(s0):
                raise DataError(f"segment {s.segment_id} is not on the common time grid")
        self.start, self.ts = s0.start, s0.interval_min
        if 1440 % self.ts:
            raise DataError("time step must divide a day")
        self.ids = [s.segment_id for s in series]
        self.index = {sid: i for i, sid in enumerate(self.ids)}
        self.S = np.vstack([s.speeds for s in series])
        self.n_seg, self.n = self.S.shape
        self.per_day = 1440 // self.ts
        self.W = int(math.ceil(cfg.outcome_window_min / self.ts))
        w = np.exp(-np.arange(self.W) * self.ts / cfg.decay_minutes)
        self.norm = float(w.mean()) if cfg.decay_normalize else 1.0

        # number of active events per (segment, step) and NaN indicator,
        # both as prefix sums for O(1) window queries
        diff = np.zeros((self.n_seg, self.n + 1))
        self.onsets = {}
        for r in records:
            i = self.index.get(r.segment_id)
            if i is None:
                continue
            kf = (r.onset - self.start).total_seconds() / 60.0 / self.ts
            k0 = int(round(kf))
            if abs(kf - k0) > 1e-9:
                continue
            span = int(math.ceil((r.expected_duration_min + cfg.activity_margin * cfg.decay_minutes)
                                 / self.ts))
            lo, hi = max(0, k0), min(self.n, k0 + span)
            if lo < hi:
                diff[i, lo] += 1
                diff[i, hi] -= 1
            self.onsets[r.event_id] = k0
        active = np.cumsum(diff[:, :-1], axis=1)
        self.active_cum = np.concatenate([np.zeros((self.n_seg, 1)), np.cumsum(active, axis=1)], 1)
        nan = np.isnan(self.S).astype(float)
        self.nan_cum = np.concatenate([np.zeros((self.n_seg, 1)), np.cumsum(nan, axis=1)], 1)
        seg_mean = np.nanmean(self.S, axis=1)
        ranks = np.argsort(np.argsort(seg_mean, kind="stable"), kind="stable")
        self.percentile = ranks / max(1, self.n_seg - 1)

    def window_active(self, i, k):
        return self.active_cum[i, k + self.W] - self.active_cum[i, k]

    def window_clean(self, i, k):
        return self.nan_cum[i, k + self.W] == self.nan_cum[i, k]

    def weekend(self, k) -> bool:
        return (self.start + timedelta(minutes=int(k) * self.ts)).weekday() >= 5

    def baseline(self, i, k) -> float | None:
        """Mean speed over the window at the same clock time on the nearest
        event-free day, preferring days of the same weekday/weekend kind."""
        day, off = divmod(k, self.per_day)
        n_days = -(-self.n // self.per_day)
        wk = self.weekend(k)
        cands = sorted((d for d in range(n_days) if d != day),
                       key=lambda d: (self.weekend(d * self.per_day + off) != wk, abs(d - day), d))
        for d in cands:
            kb = d * self.per_day + off
            if kb + self.W > self.n:
                continue
            if self.window_active(i, kb) == 0 and self.window_clean(i, kb):
                return float(self.S[i, kb:kb + self.W].mean())
        return None

    def outcome(self, i, k) -> float | None:
        base = self.baseline(i, k)
        if base is None:
            return None
        return (float(self.S[i, k:k + self.W].mean()) - base) / self.norm

    def confounders(self, i, k) -> list[float]:
        t = self.start + timedelta(minutes=int(k) * self.ts)
        ang = 2 * math.pi * (t.hour * 60 + t.minute) / 1440.0
        return [math.sin(ang), math.cos(ang), float(t.weekday() >= 5), float(self.percentile[i])]


def build_ckb(records: list[EventRecord], series: list[SpeedSeries],
              config: CkbConfig | None = None) -> tuple[CausalKnowledgeBase, BuildReport]:
    """Propensity-score-matched effect of each event type in each time period.

    Treated units are events whose outcome window is free of other events'
    activity. Controls are event-free windows of the same period, sampled at
    ``control_ratio`` times the largest treated group of that period.
    Groups with fewer than ``min_matches`` pairs are left out and listed in
    the report.
    """
    cfg = config or CkbConfig()
    cfg.validate()
    if not records or not series:
        raise DataError("build_ckb needs at least one event record and one speed series")
    grid = _Grid(list(series), records, cfg)
    periods = cfg.periods
    report = BuildReport()
    rng = np.random.default_rng(cfg.seed)

    def bump(reason):
        report.excluded_events[reason] = report.excluded_events.get(reason, 0) + 1

    treated: dict[tuple[str, str], list] = {}
    for r in records:
        i = grid.index.get(r.segment_id)
        if i is None:
            bump("segment not in speed data")
            continue
        k0 = grid.onsets.get(r.event_id)
        if k0 is None:
            bump("onset off the time grid")
            continue
        if k0 < 0 or k0 + grid.W > grid.n:
            bump("outcome window outside the series")
            continue
        if grid.window_active(i, k0) != grid.W or not grid.window_clean(i, k0):
            bump("overlapping event or missing speeds")
            continue
        y = grid.outcome(i, k0)
        if y is None:
            bump("no event-free comparison day")
            continue
        key = (r.event_type, periods.of(r.onset))
        treated.setdefault(key, []).append((r.event_id, grid.confounders(i, k0), y))

    # event-free control windows, grouped by period
    n_start = grid.n - grid.W + 1
    free = (grid.active_cum[:, grid.W:] - grid.active_cum[:, :n_start] == 0) & \
           (grid.nan_cum[:, grid.W:] - grid.nan_cum[:, :n_start] == 0)
    step_period = np.array([periods.of((grid.start.hour * 60 + grid.start.minute + k * grid.ts) % 1440)
                            for k in range(grid.per_day)])
    controls: dict[str, list] = {}
    for p in sorted({k[1] for k in treated}):
        want = int(math.ceil(cfg.control_ratio * max(len(v) for k, v in treated.items() if k[1] == p)))
        cols = np.flatnonzero(step_period[np.arange(n_start) % grid.per_day] == p)
        segs, ks = np.nonzero(free[:, cols])
        ks = cols[ks]
        pool = np.arange(segs.size)
        rng.shuffle(pool)
        rows = []
        for j in pool:
            if len(rows) >= want:
                break
            i, k = int(segs[j]), int(ks[j])
            y = grid.outcome(i, k)
            if y is not None:
                rows.append((f"C{i}:{k}", grid.confounders(i, k), y))
        controls[p] = rows

    entries = []
    for key in sorted(treated):
        et, p = key
        t_rows, c_rows = treated[key], controls.get(p, [])
        info = {"n_treated": len(t_rows), "n_control": len(c_rows)}
        report.groups[key] = info
        if len(t_rows) + len(c_rows) < 20 or not c_rows:
            report.omitted[key] = "fewer than 20 observation rows"
            continue
        rows = t_rows + c_rows
        X = np.array([r[1] for r in rows])
        T = np.array([1] * len(t_rows) + [0] * len(c_rows))
        ids = np.arange(len(rows))
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            model = fit_propensity(X, T)
        if caught:
            info["ridge"] = model.ridge
        scores = np.clip(model.score(X), 1e-12, 1 - 1e-12)
        if cfg.caliper_mode == "logit_sd":
            lg = np.log(scores) - np.log1p(-scores)
            cal = cfg.caliper * float(lg.std())
            on_logit = True
        else:
            cal, on_logit = cfg.caliper, False
        if not cal > 0:  # degenerate scores: fall back to the raw multiplier
            cal = cfg.caliper
        try:
            pairs = match_pairs(ids, T.astype(bool), scores, cal, on_logit=on_logit)
        except NoMatchesError as exc:
            report.omitted[key] = str(exc)
            continue
        info["n_matched"] = len(pairs)
        info["caliper"] = cal
        if len(pairs) < cfg.min_matches:
            report.omitted[key] = f"only {len(pairs)} matched pairs (< {cfg.min_matches})"
            continue
        yt = np.array([rows[a][2] for a, _, _ in pairs])
        yc = np.array([rows[b][2] for _, b, _ in pairs])
        est = estimate_ate(yt, yc)
        entries.append(AteEntry(et, p, est.ate, est.standard_error, est.n_matched, est.p_value))

    seen_types = {r.event_type for r in records}
    for et in EVENT_TYPES:
        if et not in seen_types:
            report.omitted[(et, "*")] = "no events of this type"

    meta = {"data_hash": data_hash(series, records), "caliper_mode": cfg.caliper_mode,
            "config": cfg.to_dict(), "built": "deterministic"}
    ckb = CausalKnowledgeBase.from_entries(entries, caliper=cfg.caliper,
                                           confounder_schema=CONFOUNDERS, metadata=meta)
    for line in report.lines():
        log.info(line)
    return ckb, report
