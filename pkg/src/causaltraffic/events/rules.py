"""Deterministic keyword extractor: structurize, then quantify with a rubric."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from datetime import datetime
from importlib import resources
from pathlib import Path

from .records import EVENT_TYPES, EventRecord, RawEventText, duration_score

SEGMENT_TOKEN = re.compile(r"\b(S\d+)\b")
CLOCK_TOKEN = re.compile(r"\bat (\d{1,2}):(\d{2})\b")
DURATION_TOKEN = re.compile(r"(\d+(?:\.\d+)?)\s*(minutes?|mins?|hours?|hrs?|h)\b", re.I)


class UnclassifiableEvent(ValueError):
    pass


class MissingLocation(ValueError):
    pass


@dataclass(frozen=True)
class PartialRecord:
    event_id: str
    event_type: str
    onset: datetime
    segment_id: str


def _pattern(keyword: str) -> re.Pattern:
    # anchored at a word start so "ice" does not fire inside "police"
    return re.compile(r"(?<![a-z0-9])" + re.escape(keyword.lower()))


class Rubric:
    """Keyword tables for event typing and scoring, loaded from JSON."""

    def __init__(self, doc: dict):
        self.version = str(doc["version"])
        self.type_priority = tuple(doc["type_priority"])
        if set(self.type_priority) != set(EVENT_TYPES):
            raise ValueError("rubric type_priority must list every event type once")
        self.type_keywords = {t: [_pattern(k) for k in doc["type_keywords"][t]]
                              for t in self.type_priority}
        self.defaults = dict(doc["defaults"])
        self.keywords = [(_pattern(k), dict(v)) for k, v in doc["keywords"].items()]
        self.duration_minutes = {int(k): float(v) for k, v in doc["duration_minutes"].items()}

    @classmethod
    def load(cls, path=None) -> "Rubric":
        if path is None:
            text = resources.files(__package__).joinpath("rubric.json").read_text(encoding="utf-8")
        else:
            text = Path(path).read_text(encoding="utf-8")
        return cls(json.loads(text))


_DEFAULT_RUBRIC: Rubric | None = None


def default_rubric() -> Rubric:
    global _DEFAULT_RUBRIC
    if _DEFAULT_RUBRIC is None:
        _DEFAULT_RUBRIC = Rubric.load()
    return _DEFAULT_RUBRIC


def structurize(raw: RawEventText, rubric: Rubric | None = None,
                segment_map: dict[str, str] | None = None) -> PartialRecord:
    """Stage 1: resolve event type, onset and segment from the text.

    ``segment_map`` maps lower-case place names to segment ids for reports
    that do not quote an id directly.
    """
    rubric = rubric or default_rubric()
    text = raw.text.lower()
    etype = next((t for t in rubric.type_priority
                  if any(p.search(text) for p in rubric.type_keywords[t])), None)
    if etype is None:
        raise UnclassifiableEvent(f"event {raw.event_id}: no event-type keyword in {raw.text!r}")

    m = SEGMENT_TOKEN.search(raw.text)
    segment = m.group(1) if m else None
    if segment is None and segment_map:
        for name in sorted(segment_map, key=len, reverse=True):
            if name.lower() in text:
                segment = segment_map[name]
                break
    if segment is None:
        raise MissingLocation(f"event {raw.event_id}: no segment identifier in {raw.text!r}")

    onset = raw.report_time
    c = CLOCK_TOKEN.search(text)
    if c and int(c.group(1)) < 24 and int(c.group(2)) < 60:
        onset = raw.report_time.replace(hour=int(c.group(1)), minute=int(c.group(2)),
                                        second=0, microsecond=0)
    return PartialRecord(raw.event_id, etype, onset, segment)


def quantify(partial: PartialRecord, raw: RawEventText, rubric: Rubric | None = None) -> EventRecord:
    """Stage 2: score the event. Each field takes the largest value among the
    rubric keywords found in the text, or the rubric default when none fire."""
    rubric = rubric or default_rubric()
    text = raw.text.lower()
    found: dict[str, list[float]] = {}
    for pat, contrib in rubric.keywords:
        if pat.search(text):
            for k, v in contrib.items():
                found.setdefault(k, []).append(v)
    vals = {k: (max(found[k]) if k in found else v) for k, v in rubric.defaults.items()}
    scores = {k: int(vals[k]) for k in ("severity", "danger", "duration_score", "impact_scope")}

    d = DURATION_TOKEN.search(raw.text)
    if d:
        minutes = float(d.group(1)) * (60.0 if d.group(2).lower().startswith("h") else 1.0)
        if "duration_score" not in found:
            scores["duration_score"] = duration_score(minutes)
    else:
        minutes = rubric.duration_minutes[scores["duration_score"]]
    return EventRecord(
        event_id=partial.event_id, event_type=partial.event_type, onset=partial.onset,
        segment_id=partial.segment_id, capacity_reduction=float(vals["capacity_reduction"]),
        expected_duration_min=max(minutes, 1.0), **scores)


class RuleBasedExtractor:
    """Pure keyword extractor; identical text always yields the same record."""

    def __init__(self, rubric: Rubric | None = None, segment_map: dict[str, str] | None = None):
        self.rubric = rubric or default_rubric()
        self.segment_map = segment_map

    def extract(self, raw: RawEventText) -> EventRecord:
        return quantify(structurize(raw, self.rubric, self.segment_map), raw, self.rubric)
