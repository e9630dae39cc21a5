import random
import socket
import threading

import pytest

from breathcheck.errors import (
    BindFailure, InvalidState, NoEvidence, PolicyInvalid, ProtocolError, RetryableError,
)
from breathcheck.head import BBox, Detection
from breathcheck.verify import client, protocol
from breathcheck.verify.pipeline import run_verification
from breathcheck.verify.server import StubServer, stub_server
from breathcheck.verify.session import (
    BiometricStub, Capability, DevicePolicy, Frame, Outcome, State, begin_session, co_present,
)

from walks import detections, liveness_steps, walk

LOCAL = DevicePolicy(Capability.HAS_LOCAL_BIOMETRIC)
REMOTE = DevicePolicy(Capability.NO_LOCAL_BIOMETRIC)


def d(name, conf):
    return Detection(BBox(0.5, 0.5, 0.1, 0.1), 0 if name == "face" else 1, conf, name)


HIT = [d("face", 0.9), d("breathalyzer", 0.8)]
MISS = [d("face", 0.9)]


def feed(session, pattern, start=0):
    for i, kind in enumerate(pattern):
        session.observe_frame(Frame(b"jpeg%d" % (start + i), (start + i + 1) * 100), HIT if kind else MISS)
    return session


def remote_session(pattern, **policy):
    s = feed(begin_session(DevicePolicy(Capability.NO_LOCAL_BIOMETRIC, **policy)), pattern)
    assert s.state is State.CO_PRESENT
    return s.route_decision()


# ------------------------------------------------------------------ policy


def test_begin_defaults():
    s = begin_session()
    assert s.state is State.CAPTURING
    assert (s.frames_seen, s.consecutive_hits) == (0, 0)


@pytest.mark.parametrize("kwargs", [
    dict(co_presence_frames=31), dict(submission_frame_count=31), dict(co_presence_frames=0),
    dict(confidence_floor=0.0), dict(confidence_floor=1.0), dict(submission_frame_count=0),
])
def test_policy_invalid(kwargs):
    with pytest.raises(PolicyInvalid):
        begin_session(DevicePolicy(**kwargs))


def test_sessions_independent():
    a, b = begin_session(REMOTE), begin_session(REMOTE)
    feed(a, [1, 1])
    assert b.frames_seen == 0 and a.session_id != b.session_id


# -------------------------------------------------------------- co_present


def test_co_present_examples():
    assert co_present(HIT, 0.5)
    assert not co_present(MISS, 0.5)
    assert co_present([d("face", 0.5), d("breathalyzer", 0.5)], 0.5)
    assert not co_present([d("face", 0.49), d("breathalyzer", 0.9)], 0.5)
    assert not co_present([], 0.5)


# ------------------------------------------------------------- transitions


def test_three_hits_co_present():
    assert feed(begin_session(REMOTE), [1, 1, 1]).state is State.CO_PRESENT


def test_miss_resets_run():
    s = feed(begin_session(REMOTE), [1, 1, 0, 1])
    assert s.consecutive_hits == 1 and s.state is State.CAPTURING


def test_budget_timeout():
    s = feed(begin_session(DevicePolicy(frame_budget=5)), [0] * 5)
    assert s.state is State.TIMED_OUT and s.reason == "no_co_presence"


def test_co_presence_on_last_budget_frame_wins():
    s = feed(begin_session(DevicePolicy(frame_budget=5)), [0, 0, 1, 1, 1])
    assert s.state is State.CO_PRESENT


def test_observe_after_capture_rejected():
    s = feed(begin_session(REMOTE), [1, 1, 1])
    with pytest.raises(InvalidState):
        feed(s, [1], start=10)


def test_timestamps_must_increase():
    s = feed(begin_session(REMOTE), [1])
    with pytest.raises(ValueError):
        s.observe_frame(Frame(b"", 100), HIT)


def test_expire():
    s = feed(begin_session(REMOTE), [1]).expire()
    assert s.state is State.TIMED_OUT and s.reason == "frames_exhausted"


# ----------------------------------------------------------------- routing


def test_routing():
    assert feed(begin_session(LOCAL), [1, 1, 1]).route_decision().state is State.ROUTED_LOCAL
    s = feed(begin_session(REMOTE), [1, 1, 1]).route_decision()
    assert s.state is State.ROUTED_REMOTE
    with pytest.raises(InvalidState):
        s.route_decision()


@pytest.mark.parametrize("result, state, reason", [
    ("match", State.ACCEPTED, "biometric_match"),
    ("no-match", State.REJECTED, "biometric_mismatch"),
    ("unavailable", State.REJECTED, "oracle_unavailable"),
])
def test_biometric_stub(result, state, reason):
    s = feed(begin_session(LOCAL), [1, 1, 1]).route_decision()
    stub = BiometricStub(result)
    s.local_biometric_check(stub)
    assert (s.state, s.reason, stub.calls) == (state, reason, 1)
    with pytest.raises(InvalidState):
        s.local_biometric_check(stub)


def test_biometric_stub_rejects_unknown_mode():
    with pytest.raises(ValueError):
        BiometricStub("maybe")


# -------------------------------------------------------------- submission


def test_submission_takes_most_recent():
    s = remote_session([1, 1, 1, 1, 1], co_presence_frames=5, submission_frame_count=3)
    p = s.build_submission()
    assert [f.frame.timestamp_ms for f in p.frames] == [300, 400, 500]
    assert not p.short_evidence and (p.k, p.n, p.floor) == (3, 5, 0.5)


def test_submission_skips_misses():
    s = remote_session([1, 0, 1, 1, 1], submission_frame_count=5)
    p = s.build_submission()
    assert [f.frame.timestamp_ms for f in p.frames] == [100, 300, 400, 500]
    assert p.short_evidence


def test_short_evidence_flag():
    s = remote_session([1, 1], co_presence_frames=2, submission_frame_count=3)
    p = s.build_submission()
    assert len(p.frames) == 2 and p.short_evidence


def test_no_evidence():
    s = remote_session([1, 1, 1])
    s.state = State.ROUTED_REMOTE
    s.evidence.clear()
    with pytest.raises(NoEvidence):
        s.build_submission()


def test_payload_round_trip_byte_stable():
    s = remote_session([1, 1, 1, 1, 1], co_presence_frames=5, submission_frame_count=5)
    payload = s.build_submission()
    data = protocol.serialize_payload(payload)
    back = protocol.parse_payload(data)
    assert protocol.serialize_payload(back) == data
    assert back.session_id == payload.session_id
    assert [f.frame for f in back.frames] == [f.frame for f in payload.frames]


def test_payload_document_fields():
    doc = remote_session([1, 1, 1], submission_frame_count=3).build_submission().to_document()
    assert doc["v"] == 1
    assert set(doc) >= {"session_id", "frames", "policy"}
    assert set(doc["policy"]) == {"k", "n", "floor"}
    assert set(doc["frames"][0]) == {"timestamp_ms", "image", "detections"}
    assert set(doc["frames"][0]["detections"][0]) == {"class", "confidence", "cx", "cy", "w", "h"}


@pytest.mark.parametrize("mutate", [
    lambda doc: doc.update(v=2),
    lambda doc: doc.pop("session_id"),
    lambda doc: doc["frames"][0].update(image="***"),
    lambda doc: doc["frames"].reverse(),
    lambda doc: doc.update(frames=[]),
    lambda doc: doc["policy"].update(k=1),
    lambda doc: doc.update(short_evidence=False) or doc["policy"].update(k=9),
])
def test_payload_validation(mutate):
    doc = remote_session([1, 1, 1], submission_frame_count=3).build_submission().to_document()
    mutate(doc)
    with pytest.raises(ProtocolError):
        protocol.SubmissionPayload.from_document(doc)


def test_framing_round_trip():
    a, b = socket.socketpair()
    with a, b:
        protocol.write_message(a, b"hello")
        protocol.write_message(a, b"")
        assert protocol.read_message(b) == b"hello"
        assert protocol.read_message(b) == b""
        a.shutdown(socket.SHUT_WR)
        assert protocol.read_message(b) is None


# ------------------------------------------------------------- stub server


def exchange(sock, body: bytes) -> dict:
    protocol.write_message(sock, body)
    return protocol.decode_document(protocol.read_message(sock))


@pytest.mark.parametrize("mode, token, verdict", [
    ("accept-all", None, "accepted"),
    ("reject-all", None, "rejected"),
    ("match-token", "secret", "accepted"),
    ("match-token", "other", "rejected"),
])
def test_stub_modes(mode, token, verdict):
    payload = remote_session([1, 1, 1], submission_frame_count=3).build_submission()
    payload = protocol.SubmissionPayload("secret", payload.frames, 3, 3, 0.5)
    with StubServer(mode, token) as server:
        outcome = client.submit_remote(payload, server.endpoint)
    expected = State.ACCEPTED if verdict == "accepted" else State.REJECTED
    assert outcome.state is expected


def test_malformed_payload_keeps_connection():
    good = protocol.serialize_payload(remote_session([1, 1, 1], submission_frame_count=3).build_submission())
    with stub_server("accept-all") as server, socket.create_connection(server.address, timeout=5) as sock:
        bad = exchange(sock, b"{not json")
        assert bad["verdict"] == "rejected" and bad["error"] is True
        assert exchange(sock, good)["verdict"] == "accepted"
        assert server.protocol_errors == 1 and server.requests == 2


def test_oversized_header_gets_error_reply():
    with stub_server() as server, socket.create_connection(server.address, timeout=5) as sock:
        sock.sendall(protocol.HEADER.pack(protocol.MAX_MESSAGE + 1))
        doc = protocol.decode_document(protocol.read_message(sock))
        assert doc["verdict"] == "rejected" and doc["error"]


def test_concurrent_clients():
    payload = remote_session([1, 1, 1], submission_frame_count=3).build_submission()
    results = []
    with stub_server("accept-all") as server:
        threads = [
            threading.Thread(target=lambda: results.append(client.submit_remote(payload, server.endpoint)))
            for _ in range(8)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    assert [r.state for r in results] == [State.ACCEPTED] * 8


def test_bind_failure():
    with stub_server() as server:
        with pytest.raises(BindFailure):
            StubServer(port=server.address[1])


def test_stub_mode_validation():
    with pytest.raises(ValueError):
        StubServer("accept-some")
    with pytest.raises(ValueError):
        StubServer("match-token")


# ------------------------------------------------------------------ client


def test_retry_walk_then_unreachable():
    sleeps, calls = [], []

    def down(payload, endpoint, timeout):
        calls.append(endpoint)
        raise RetryableError("connection refused")

    payload = remote_session([1, 1, 1], submission_frame_count=3).build_submission()
    outcome = client.submit_remote(payload, "127.0.0.1:9", sleep=sleeps.append, send=down)
    assert outcome == Outcome(State.REJECTED, "unreachable")
    assert len(calls) == 4
    assert sleeps == pytest.approx([0.2, 0.4, 0.8])


def test_retry_recovers():
    attempts = iter([RetryableError("x"), {"verdict": "accepted", "reason": "ok"}])

    def flaky(payload, endpoint, timeout):
        r = next(attempts)
        if isinstance(r, Exception):
            raise r
        return r

    payload = remote_session([1, 1, 1], submission_frame_count=3).build_submission()
    outcome = client.submit_remote(payload, "h:1", sleep=lambda s: None, send=flaky)
    assert outcome == Outcome(State.ACCEPTED, "ok")


def test_real_refused_port_is_unreachable():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    payload = remote_session([1, 1, 1], submission_frame_count=3).build_submission()
    outcome = client.submit_remote(payload, f"127.0.0.1:{port}", sleep=lambda s: None, timeout=1.0)
    assert outcome.reason == "unreachable" and outcome.state is State.REJECTED


def test_parse_endpoint():
    assert client.parse_endpoint("localhost:80") == ("localhost", 80)
    with pytest.raises(ValueError):
        client.parse_endpoint("localhost")


# ---------------------------------------------------------------- pipeline


def stream(pattern):
    return [(Frame(b"img", (i + 1) * 33), HIT if k else MISS) for i, k in enumerate(pattern)]


def test_pipeline_local_accept():
    s = run_verification(stream([0, 1, 1, 1]), LOCAL, biometric=BiometricStub("match"))
    assert s.state is State.ACCEPTED
    assert s.history == [State.IDLE, State.CAPTURING, State.CO_PRESENT, State.ROUTED_LOCAL, State.ACCEPTED]


def test_pipeline_local_without_oracle_rejects():
    s = run_verification(stream([1, 1, 1]), LOCAL)
    assert (s.state, s.reason) == (State.REJECTED, "oracle_unavailable")


def test_pipeline_remote_via_stub():
    with stub_server("accept-all") as server:
        s = run_verification(stream([1, 1, 1]), REMOTE, endpoint=server.endpoint)
    assert s.state is State.ACCEPTED


def test_pipeline_remote_without_endpoint_rejects():
    s = run_verification(stream([1, 1, 1]), REMOTE)
    assert (s.state, s.reason) == (State.REJECTED, "no_endpoint")


def test_pipeline_stops_consuming_after_capture():
    consumed = []

    def frames():
        for i, item in enumerate(stream([1] * 10)):
            consumed.append(i)
            yield item

    run_verification(frames(), LOCAL, biometric=BiometricStub())
    assert len(consumed) == 3


def test_pipeline_exhausted_input_times_out():
    s = run_verification(stream([1, 0]), REMOTE)
    assert (s.state, s.reason) == (State.TIMED_OUT, "frames_exhausted")


# -------------------------------------------------------------- properties


def test_random_walks_keep_invariants():
    rng = random.Random(99)
    for _ in range(2000):
        assert walk(rng) == []


def test_liveness_bound():
    rng = random.Random(5)
    for _ in range(500):
        _, ok = liveness_steps(rng)
        assert ok


def test_walk_detects_helper_kinds():
    assert co_present(detections("hit", 0.5), 0.5)
    assert not co_present(detections("weak", 0.5), 0.5)
    assert not co_present(detections("miss", 0.5), 0.5)
