"""Event text to quantified :class:`EventRecord` objects."""

from .llm import ExtractionFailed, LLMConfig, LLMExtractor, extract_all, llm_extract
from .records import (
    DISPLAY_NAMES,
    EVENT_TYPES,
    EventRecord,
    InvalidRecord,
    RawEventText,
    read_raw_events,
    read_records,
    write_jsonl,
)
from .rules import (
    MissingLocation,
    PartialRecord,
    Rubric,
    RuleBasedExtractor,
    UnclassifiableEvent,
    quantify,
    structurize,
)

__all__ = [
    "DISPLAY_NAMES", "EVENT_TYPES", "EventRecord", "ExtractionFailed", "InvalidRecord",
    "LLMConfig", "LLMExtractor", "MissingLocation", "PartialRecord", "RawEventText", "Rubric",
    "RuleBasedExtractor", "UnclassifiableEvent", "extract_all", "llm_extract", "quantify",
    "read_raw_events", "read_records", "structurize", "write_jsonl",
]
