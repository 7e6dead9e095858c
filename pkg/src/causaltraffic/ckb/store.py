"""Immutable store of per-group treatment effects, with JSON persistence and
a tabular report."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping

from ..data import PERIODS
from ..events.records import DISPLAY_NAMES, EVENT_TYPES

SCHEMA_VERSION = 1
PERIOD_HEADERS = {"MorningPeak": "Morning Peak", "EveningPeak": "Evening Peak",
                  "OffPeak": "Off-peak", "Night": "Night"}


class CkbFormatError(ValueError):
    pass


def stars(p_value: float) -> str:
    if p_value < 0.001:
        return "***"
    if p_value < 0.01:
        return "**"
    if p_value < 0.05:
        return "*"
    return ""


@dataclass(frozen=True)
class AteEntry:
    event_type: str
    time_period: str
    ate: float
    standard_error: float
    n_matched: int
    p_value: float

    def __post_init__(self):
        if self.n_matched < 1:
            raise CkbFormatError("n_matched must be at least 1")
        if not self.standard_error >= 0:
            raise CkbFormatError("standard_error must be non-negative")
        if not 0.0 <= self.p_value <= 1.0:
            raise CkbFormatError("p_value must lie in [0, 1]")
        if not math.isfinite(self.ate):
            raise CkbFormatError("ate must be finite")

    @property
    def key(self) -> tuple[str, str]:
        return self.event_type, self.time_period

    @property
    def confidence(self) -> float:
        return 1.0 / (1.0 + self.standard_error)

    def cell(self, digits: int = 2) -> str:
        """``-10.06*** (0.51)``"""
        se = "inf" if math.isinf(self.standard_error) else f"{self.standard_error:.{digits}f}"
        return f"{self.ate:.{digits}f}{stars(self.p_value)} ({se})"


@dataclass(frozen=True, eq=False)
class CausalKnowledgeBase:
    """Effect estimates keyed by ``(event_type, time_period)``."""

    entries: Mapping[tuple[str, str], AteEntry]
    caliper: float = 0.2
    confounder_schema: tuple[str, ...] = ()
    metadata: Mapping = field(default_factory=dict)

    def __post_init__(self):
        ents = dict(self.entries)
        for k, e in ents.items():
            if k != e.key:
                raise CkbFormatError(f"entry stored under {k} but describes {e.key}")
        object.__setattr__(self, "entries", MappingProxyType(ents))
        object.__setattr__(self, "confounder_schema", tuple(self.confounder_schema))
        object.__setattr__(self, "metadata", MappingProxyType(dict(self.metadata)))

    @classmethod
    def from_entries(cls, entries: Iterable[AteEntry], **kw) -> "CausalKnowledgeBase":
        ents: dict = {}
        for e in entries:
            if e.key in ents:
                raise CkbFormatError(f"duplicate entry for {e.key}")
            ents[e.key] = e
        return cls(ents, **kw)

    def __eq__(self, other):
        if not isinstance(other, CausalKnowledgeBase):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def __len__(self):
        return len(self.entries)

    def get(self, event_type: str, time_period: str) -> AteEntry | None:
        return self.entries.get((event_type, time_period))

    def query(self, event_type: str, time_period: str) -> tuple[float, float]:
        """``(ate, 1 / (1 + se))`` for a stored group, ``(0, 0)`` otherwise."""
        e = self.entries.get((event_type, time_period))
        if e is None:
            return 0.0, 0.0
        return e.ate, e.confidence

    def to_dict(self) -> dict:
        order = {t: i for i, t in enumerate(EVENT_TYPES)}
        porder = {p: i for i, p in enumerate(PERIODS)}
        keys = sorted(self.entries, key=lambda k: (order.get(k[0], 99), k[0],
                                                   porder.get(k[1], 99), k[1]))
        return {
            "schema_version": SCHEMA_VERSION,
            "caliper": self.caliper,
            "confounder_schema": list(self.confounder_schema),
            "metadata": dict(self.metadata),
            "entries": [asdict(self.entries[k]) for k in keys],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CausalKnowledgeBase":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise CkbFormatError(f"unsupported schema_version {d.get('schema_version')!r}")
        try:
            entries = [AteEntry(e["event_type"], e["time_period"], float(e["ate"]),
                                float(e["standard_error"]), int(e["n_matched"]),
                                float(e["p_value"])) for e in d["entries"]]
            return cls.from_entries(entries, caliper=d["caliper"],
                                    confounder_schema=d["confounder_schema"],
                                    metadata=d.get("metadata", {}))
        except (KeyError, TypeError) as exc:
            raise CkbFormatError(f"malformed knowledge base: {exc}") from None

    def dumps(self) -> str:
        # repr-exact floats; Infinity is allowed for single-pair groups
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "CausalKnowledgeBase":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except ValueError as exc:
            raise CkbFormatError(f"{path}: not valid JSON ({exc})") from None
        return cls.from_dict(doc)


def query(ckb: CausalKnowledgeBase, event_type: str, time_period: str) -> tuple[float, float]:
    return ckb.query(event_type, time_period)


def table_row(ckb: CausalKnowledgeBase, event_type: str, style: str = "text",
              periods=PERIODS) -> str:
    cells = []
    for p in periods:
        e = ckb.get(event_type, p)
        cells.append(e.cell() if e else "-")
    name = DISPLAY_NAMES.get(event_type, event_type)
    if style == "latex":
        return " & ".join([name, *cells]) + r" \\"
    return "  ".join([f"{name:<16}", *(f"{c:>17}" for c in cells)])


def render_table(ckb: CausalKnowledgeBase, style: str = "text", periods=PERIODS) -> str:
    """Event types as rows, time periods as columns, cells ``ate<stars> (se)``."""
    if style not in ("text", "latex"):
        raise ValueError("style must be 'text' or 'latex'")
    heads = [PERIOD_HEADERS.get(p, p) for p in periods]
    types = [t for t in EVENT_TYPES if any(ckb.get(t, p) for p in periods)]
    types += sorted({k[0] for k in ckb.entries} - set(EVENT_TYPES))
    if style == "latex":
        lines = [" & ".join(["Event Type", *heads]) + r" \\"]
    else:
        lines = ["  ".join([f"{'Event Type':<16}", *(f"{h:>17}" for h in heads)])]
    lines += [table_row(ckb, t, style, periods) for t in types]
    lines.append("*** p < 0.001, ** p < 0.01, * p < 0.05; standard errors in parentheses")
    return "\n".join(lines)
