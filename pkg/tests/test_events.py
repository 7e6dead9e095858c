import json
import logging
import threading
import time
from datetime import datetime
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from causaltraffic.data import SyntheticSpec, generate_synthetic
from causaltraffic.events import (
    EventRecord,
    ExtractionFailed,
    InvalidRecord,
    LLMConfig,
    LLMExtractor,
    MissingLocation,
    RawEventText,
    RuleBasedExtractor,
    UnclassifiableEvent,
    extract_all,
    quantify,
    read_records,
    structurize,
    write_jsonl,
)
from causaltraffic.events.records import duration_score

REPORT = datetime(2024, 5, 6, 7, 55)


def raw(text, eid="e1"):
    return RawEventText(eid, text, REPORT, "test")


def test_accident_with_clock_time():
    p = structurize(raw("accident on segment S12 at 08:10"))
    assert (p.event_type, p.segment_id, p.onset) == ("Accident", "S12", datetime(2024, 5, 6, 8, 10))


def test_roadwork_uses_report_time():
    p = structurize(raw("roadwork near S3, lane closed"))
    assert (p.event_type, p.segment_id, p.onset) == ("Construction", "S3", REPORT)


def test_missing_location():
    with pytest.raises(MissingLocation):
        structurize(raw("heavy fog citywide"))


def test_unclassifiable():
    with pytest.raises(UnclassifiableEvent):
        structurize(raw("something happened on S4"))


def test_police_is_not_ice():
    assert structurize(raw("police checkpoint on S2")).event_type == "TrafficControl"


def test_segment_map_lookup():
    p = structurize(raw("crash on Ring Road west"), segment_map={"ring road west": "S9"})
    assert p.segment_id == "S9"


def test_fender_bender_on_shoulder():
    r = raw("minor fender-bender, shoulder of S1")
    rec = quantify(structurize(r), r)
    assert rec.severity == 1 and rec.capacity_reduction == 0.1


def test_no_keywords_gives_defaults():
    r = raw("accident on S1")
    rec = quantify(structurize(r), r)
    assert (rec.severity, rec.danger, rec.duration_score, rec.impact_scope) == (2, 2, 2, 2)
    assert rec.capacity_reduction == 0.2


def test_all_lanes_closed():
    r = raw("crash on S5, all lanes closed")
    rec = quantify(structurize(r), r)
    assert rec.capacity_reduction == 1.0 and rec.impact_scope == 5


def test_stated_duration():
    r = raw("roadwork on S5, expected 90 minutes")
    rec = RuleBasedExtractor().extract(r)
    assert rec.expected_duration_min == 90.0 and rec.duration_score == duration_score(90)


@pytest.mark.parametrize("m,s", [(30, 1), (31, 2), (60, 2), (120, 3), (240, 4), (241, 5)])
def test_duration_score_cutoffs(m, s):
    assert duration_score(m) == s


def test_rule_extractor_is_pure():
    r = raw("serious multi-vehicle accident on S7, lanes closed")
    ex = RuleBasedExtractor()
    assert ex.extract(r) == ex.extract(r)


def test_generated_texts_recover_type_and_segment():
    spec = SyntheticSpec(segment_count=8, horizon_days=3, random_seed=5)
    ds = generate_synthetic(spec)
    recs, failed = extract_all(ds.raw_events, RuleBasedExtractor())
    assert not failed
    for got, truth in zip(recs, ds.records):
        assert (got.event_type, got.segment_id, got.onset) == (
            truth.event_type, truth.segment_id, truth.onset)
        assert got.expected_duration_min == truth.expected_duration_min


def test_record_round_trip(tmp_path):
    rec = RuleBasedExtractor().extract(raw("major construction on S4, lanes closed"))
    assert EventRecord.from_dict(json.loads(json.dumps(rec.to_dict()))) == rec
    write_jsonl(tmp_path / "r.jsonl", [rec, rec])
    assert read_records(tmp_path / "r.jsonl") == [rec, rec]


def test_record_validation():
    with pytest.raises(InvalidRecord):
        EventRecord("x", "Accident", REPORT, "S1", 6, 1, 1, 1, 0.5, 30.0)
    with pytest.raises(InvalidRecord):
        EventRecord("x", "Meteor", REPORT, "S1", 1, 1, 1, 1, 0.5, 30.0)
    with pytest.raises(InvalidRecord):
        EventRecord("x", "Hazard", REPORT, "S1", 1, 1, 1, 1, 1.5, 30.0)


# -- service client against a local HTTP stub ------------------------------

class _Stub:
    def __init__(self, severity=4, delay=0.0, wrap=False):
        self.severity, self.delay, self.wrap = severity, delay, wrap
        self.requests = []


def _serve(stub):
    class Handler(BaseHTTPRequestHandler):
        def log_message(self, *a):
            pass

        def do_POST(self):
            body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
            stub.requests.append((body, self.headers.get("Authorization")))
            if stub.delay:
                time.sleep(stub.delay)
            if body["stage"] == "structurize":
                doc = {"event_type": "Accident", "segment_id": "S3", "onset": "2024-05-06T08:00:00"}
            else:
                doc = {"severity": stub.severity, "danger": 3, "duration_score": 2,
                       "impact_scope": 2, "capacity_reduction": 0.4, "expected_duration_min": 45}
            if stub.wrap:
                doc = {"content": json.dumps(doc)}
            out = json.dumps(doc).encode()
            try:
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(out)))
                self.end_headers()
                self.wfile.write(out)
            except (BrokenPipeError, ConnectionResetError):
                pass

    srv = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
    threading.Thread(target=srv.serve_forever, daemon=True).start()
    return srv


@pytest.fixture
def service():
    servers = []

    def start(**kw):
        stub = _Stub(**kw)
        srv = _serve(stub)
        servers.append(srv)
        return stub, LLMConfig(f"http://127.0.0.1:{srv.server_address[1]}/v1", timeout=2.0)

    yield start
    for s in servers:
        s.shutdown()
        s.server_close()


def test_service_pass_through(service, monkeypatch):
    stub, cfg = service(severity=4)
    monkeypatch.setenv(cfg.api_key_env, "tok")
    rec = LLMExtractor(cfg).extract(raw("accident on S3"))
    assert rec.severity == 4 and rec.segment_id == "S3" and rec.expected_duration_min == 45
    assert [b["stage"] for b, _ in stub.requests] == ["structurize", "quantify"]
    assert "accident on S3" in stub.requests[0][0]["prompt"]
    assert stub.requests[0][1] == "Bearer tok"


def test_service_wrapped_content(service):
    _, cfg = service(wrap=True)
    assert LLMExtractor(cfg).extract(raw("accident on S3")).severity == 4


def test_service_clamps_out_of_range(service, caplog):
    _, cfg = service(severity=9)
    with caplog.at_level(logging.WARNING):
        rec = LLMExtractor(cfg).extract(raw("accident on S3"))
    assert rec.severity == 5
    assert "clamped" in caplog.text


def test_service_timeouts_exhaust_retries(service):
    stub, cfg = service(delay=0.6)
    cfg.timeout = 0.2
    with pytest.raises(ExtractionFailed):
        LLMExtractor(cfg).extract(raw("accident on S3"))
    assert len(stub.requests) == 3


def test_unreachable_service_falls_back_to_rules():
    cfg = LLMConfig("http://127.0.0.1:9/none", timeout=0.2, retries=0)
    recs, failed = extract_all([raw("accident on S3")], LLMExtractor(cfg), RuleBasedExtractor())
    assert not failed and recs[0] == RuleBasedExtractor().extract(raw("accident on S3"))


def test_failures_are_reported():
    recs, failed = extract_all([raw("accident on S3"), raw("fog citywide", "e2")],
                               RuleBasedExtractor(), max_workers=2)
    assert len(recs) == 1 and failed[0][0] == "e2"
