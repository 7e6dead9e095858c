"""Raw and quantified event records, plus their JSON Lines encoding."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from datetime import datetime
from pathlib import Path
from typing import Iterable

EVENT_TYPES = ("Accident", "Construction", "Hazard", "RoadClosure", "TrafficControl")
DISPLAY_NAMES = {
    "Accident": "Accident",
    "Construction": "Construction",
    "Hazard": "Hazard",
    "RoadClosure": "Road Closure",
    "TrafficControl": "Traffic Control",
}
SCORE_FIELDS = ("severity", "danger", "duration_score", "impact_scope")


class InvalidRecord(ValueError):
    pass


def duration_score(minutes: float) -> int:
    """Map an expected duration in minutes onto the 1-5 duration scale."""
    for score, limit in ((1, 30), (2, 60), (3, 120), (4, 240)):
        if minutes <= limit:
            return score
    return 5


@dataclass(frozen=True)
class RawEventText:
    event_id: str
    text: str
    report_time: datetime
    source: str = ""

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise InvalidRecord(f"event {self.event_id}: empty text")

    def to_dict(self) -> dict:
        return {"event_id": self.event_id, "text": self.text,
                "report_time": self.report_time.isoformat(), "source": self.source}

    @classmethod
    def from_dict(cls, d: dict) -> "RawEventText":
        return cls(str(d["event_id"]), d["text"], datetime.fromisoformat(d["report_time"]),
                   d.get("source", ""))


@dataclass(frozen=True)
class EventRecord:
    """A structured, quantified traffic event."""

    event_id: str
    event_type: str
    onset: datetime
    segment_id: str
    severity: int
    danger: int
    duration_score: int
    impact_scope: int
    capacity_reduction: float
    expected_duration_min: float

    def __post_init__(self):
        if self.event_type not in EVENT_TYPES:
            raise InvalidRecord(f"event {self.event_id}: unknown type {self.event_type!r}")
        for name in SCORE_FIELDS:
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or not 1 <= v <= 5:
                raise InvalidRecord(f"event {self.event_id}: {name}={v!r} not an integer in 1..5")
        if not 0.0 <= self.capacity_reduction <= 1.0:
            raise InvalidRecord(f"event {self.event_id}: capacity_reduction outside [0, 1]")
        if not self.expected_duration_min > 0:
            raise InvalidRecord(f"event {self.event_id}: expected_duration_min must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["onset"] = self.onset.isoformat()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EventRecord":
        names = {f.name for f in fields(cls)}
        missing = names - d.keys()
        if missing:
            raise InvalidRecord(f"missing fields: {sorted(missing)}")
        kw = {k: d[k] for k in names}
        kw["event_id"] = str(kw["event_id"])
        kw["segment_id"] = str(kw["segment_id"])
        kw["onset"] = datetime.fromisoformat(kw["onset"])
        kw["capacity_reduction"] = float(kw["capacity_reduction"])
        kw["expected_duration_min"] = float(kw["expected_duration_min"])
        return cls(**kw)


def write_jsonl(path, items: Iterable) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item in items:
            fh.write(json.dumps(item.to_dict(), sort_keys=True) + "\n")


def _read_jsonl(path, parse):
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(parse(json.loads(line)))
        except (ValueError, KeyError, TypeError) as exc:
            raise InvalidRecord(f"{path}:{lineno}: {exc}") from None
    return out


def read_records(path) -> list[EventRecord]:
    return _read_jsonl(path, EventRecord.from_dict)


def read_raw_events(path) -> list[RawEventText]:
    return _read_jsonl(path, RawEventText.from_dict)
