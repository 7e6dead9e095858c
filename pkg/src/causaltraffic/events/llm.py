"""Two-stage extraction through a generic JSON-over-HTTP language-model service.

Each request is a POST of ``{"stage", "event_id", "prompt"}``. The service
answers with either the JSON object itself or ``{"content": "<json text>"}``.
If the environment variable named by ``LLMConfig.api_key_env`` is set, its
value is sent as a bearer token.
"""

from __future__ import annotations

import json
import logging
import os
import socket
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

from .records import EVENT_TYPES, EventRecord, InvalidRecord, RawEventText
from .rules import MissingLocation, RuleBasedExtractor, UnclassifiableEvent

log = logging.getLogger(__name__)

API_KEY_ENV = "CAUSALTRAFFIC_LLM_API_KEY"


class RetryableError(RuntimeError):
    """Transport-level failure (timeout, refused connection, 5xx)."""


class ExtractionFailed(RuntimeError):
    pass


@dataclass
class LLMConfig:
    endpoint: str
    prompts_dir: str | None = None
    timeout: float = 30.0
    retries: int = 2
    max_in_flight: int = 4
    api_key_env: str = API_KEY_ENV

    def template(self, name: str) -> str:
        if self.prompts_dir:
            return (Path(self.prompts_dir) / f"{name}.txt").read_text(encoding="utf-8")
        return resources.files(__package__).joinpath("prompts", f"{name}.txt").read_text(
            encoding="utf-8")


Transport = Callable[[dict, LLMConfig], dict]


def http_transport(payload: dict, cfg: LLMConfig) -> dict:
    headers = {"Content-Type": "application/json"}
    key = os.environ.get(cfg.api_key_env)
    if key:
        headers["Authorization"] = f"Bearer {key}"
    req = urllib.request.Request(cfg.endpoint, data=json.dumps(payload).encode(),
                                 headers=headers, method="POST")
    try:
        with urllib.request.urlopen(req, timeout=cfg.timeout) as resp:
            body = resp.read().decode("utf-8")
    except urllib.error.HTTPError as exc:
        if exc.code >= 500:
            raise RetryableError(f"HTTP {exc.code}") from None
        raise ExtractionFailed(f"HTTP {exc.code} from {cfg.endpoint}") from None
    except (urllib.error.URLError, socket.timeout, TimeoutError, ConnectionError) as exc:
        raise RetryableError(str(exc)) from None
    try:
        doc = json.loads(body)
    except ValueError:
        raise InvalidRecord("response is not JSON") from None
    if isinstance(doc, dict) and isinstance(doc.get("content"), str):
        try:
            doc = json.loads(doc["content"])
        except ValueError:
            raise InvalidRecord("content field is not JSON") from None
    if not isinstance(doc, dict):
        raise InvalidRecord("response is not a JSON object")
    return doc


def _clamp_int(name: str, v, lo: int, hi: int, warn: list) -> int:
    iv = int(round(float(v)))
    if iv < lo or iv > hi:
        warn.append(f"{name}={v} clamped into [{lo}, {hi}]")
        iv = min(hi, max(lo, iv))
    return iv


def _build_record(raw: RawEventText, stage1: dict, stage2: dict) -> EventRecord:
    etype = stage1.get("event_type")
    if etype not in EVENT_TYPES:
        raise InvalidRecord(f"unknown event_type {etype!r}")
    seg = stage1.get("segment_id")
    if not seg:
        raise InvalidRecord("missing segment_id")
    onset = datetime.fromisoformat(stage1["onset"]) if stage1.get("onset") else raw.report_time
    warn: list[str] = []
    scores = {k: _clamp_int(k, stage2[k], 1, 5, warn)
              for k in ("severity", "danger", "duration_score", "impact_scope")}
    cap = float(stage2["capacity_reduction"])
    if not 0.0 <= cap <= 1.0:
        warn.append(f"capacity_reduction={cap} clamped into [0, 1]")
        cap = min(1.0, max(0.0, cap))
    dur = float(stage2.get("expected_duration_min", 30.0))
    if dur <= 0:
        warn.append(f"expected_duration_min={dur} raised to 1")
        dur = 1.0
    for w in warn:
        log.warning("event %s: %s", raw.event_id, w)
    return EventRecord(raw.event_id, etype, onset, str(seg), capacity_reduction=cap,
                       expected_duration_min=dur, **scores)


def llm_extract(raw: RawEventText, cfg: LLMConfig, transport: Transport = http_transport) -> EventRecord:
    """Structurize then quantify ``raw`` through the service.

    Transport failures and unusable answers are retried ``cfg.retries`` times;
    after that :class:`ExtractionFailed` is raised.
    """
    s1_tmpl, s2_tmpl = cfg.template("structurize"), cfg.template("quantify")
    last = None
    for attempt in range(cfg.retries + 1):
        try:
            prompt1 = s1_tmpl.format(text=raw.text, report_time=raw.report_time.isoformat(),
                                     event_types=", ".join(EVENT_TYPES))
            stage1 = transport({"stage": "structurize", "event_id": raw.event_id,
                                "prompt": prompt1}, cfg)
            prompt2 = s2_tmpl.format(structured=json.dumps(stage1, sort_keys=True), text=raw.text)
            stage2 = transport({"stage": "quantify", "event_id": raw.event_id,
                                "prompt": prompt2}, cfg)
            return _build_record(raw, stage1, stage2)
        except (RetryableError, InvalidRecord, KeyError, TypeError, ValueError) as exc:
            last = exc
            log.info("event %s: attempt %d failed: %s", raw.event_id, attempt + 1, exc)
    raise ExtractionFailed(f"event {raw.event_id}: {cfg.retries + 1} attempts failed ({last})")


class LLMExtractor:
    def __init__(self, cfg: LLMConfig, transport: Transport = http_transport):
        self.cfg = cfg
        self.transport = transport

    def extract(self, raw: RawEventText) -> EventRecord:
        return llm_extract(raw, self.cfg, self.transport)


def extract_all(raws: Sequence[RawEventText], extractor, fallback=None,
                max_workers: int = 1) -> tuple[list[EventRecord], list[tuple[str, str]]]:
    """Run ``extractor`` over ``raws`` keeping input order.

    Failures are retried with ``fallback`` when given; anything still failing
    is returned as ``(event_id, reason)``.
    """
    def one(raw):
        try:
            return extractor.extract(raw), None
        except (ExtractionFailed, UnclassifiableEvent, MissingLocation, InvalidRecord) as exc:
            if fallback is not None and fallback is not extractor:
                try:
                    return fallback.extract(raw), None
                except (UnclassifiableEvent, MissingLocation, InvalidRecord) as exc2:
                    return None, str(exc2)
            return None, str(exc)

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            results = list(pool.map(one, raws))
    else:
        results = [one(r) for r in raws]
    records = [rec for rec, _ in results if rec is not None]
    failures = [(raw.event_id, err) for raw, (rec, err) in zip(raws, results) if rec is None]
    return records, failures


__all__ = ["LLMConfig", "LLMExtractor", "ExtractionFailed", "RetryableError", "llm_extract",
           "extract_all", "http_transport", "RuleBasedExtractor"]
