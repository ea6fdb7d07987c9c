import json
import random
import subprocess
import sys
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from chainview.gateway import (
    AuthFailure, BackendConfig, CacheMiss, ChatMessage, ImagePart, MalformedResponse,
    OpenAIBackend, RateLimited, RecordReplayBackend, ScriptEntry, ScriptExhausted,
    ScriptedBackend, TextPart, TooManyImages, TransportFailure, backoff_delays, message_to_log,
    record_and_replay, request_hash,
)

IMAGE = bytes(range(256)) * 4
FIXED_MESSAGES = [
    ChatMessage.text("system", "You are a careful assistant."),
    ChatMessage("user", (TextPart("What is shown?"), ImagePart(IMAGE))),
]
# frozen once from this fixture; any change to the hashing scheme must be deliberate
FIXED_HASH = "6d99a1edc334384eb2747e8c5cbe7d634aa89bfdd77ff60df8f2562ef136451b"


class Stub:
    """Local chat-completions server that replays a status sequence and records bodies."""

    def __init__(self, statuses, reply="ANSWER: chair", body=None):
        self.statuses = list(statuses)
        self.reply = reply
        self.body = body
        self.bodies: list[bytes] = []
        self.headers: list[dict] = []
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                n = int(self.headers["Content-Length"])
                stub.bodies.append(self.rfile.read(n))
                stub.headers.append(dict(self.headers))
                status = stub.statuses.pop(0) if stub.statuses else 200
                if status == 200:
                    payload = stub.body if stub.body is not None else json.dumps(
                        {"choices": [{"message": {"role": "assistant", "content": stub.reply}}]})
                else:
                    payload = json.dumps({"error": {"code": status}})
                data = payload.encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.server.serve_forever, args=(0.02,), daemon=True)

    @property
    def url(self):
        return f"http://127.0.0.1:{self.server.server_address[1]}/v1"

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()


def backend(stub, monkeypatch, **kw):
    monkeypatch.setenv("COV_TEST_KEY", "sk-test")
    cfg = BackendConfig(endpoint=stub.url, model_name="m", api_key_env="COV_TEST_KEY", timeout_s=5, **kw)
    return OpenAIBackend(cfg, sleep=lambda s: None, seed=0)


def test_scripted_replay_and_exhaustion():
    b = ScriptedBackend(["ANSWER: chair"])
    assert b.complete([ChatMessage.text("user", "q")]) == "ANSWER: chair"
    with pytest.raises(ScriptExhausted):
        b.complete([ChatMessage.text("user", "q")])


def test_scripted_keyed_entries():
    b = ScriptedBackend([ScriptEntry("A"), ScriptEntry("K", match="budget"), ScriptEntry("B")])
    assert b.complete([ChatMessage.text("user", "hello")]) == "A"
    assert b.complete([ChatMessage.text("user", "respect the budget")]) == "K"
    assert b.complete([ChatMessage.text("user", "budget again")]) == "B"


def test_scripted_is_deterministic():
    reqs = [[ChatMessage.text("user", str(i))] for i in range(3)]
    outs = []
    for _ in range(2):
        b = ScriptedBackend(["x", ScriptEntry("k", match="1"), "z"])
        outs.append([b.complete(r) for r in reqs])
    assert outs[0] == outs[1] == ["x", "k", "z"]


def test_retry_after_two_429(monkeypatch):
    with Stub([429, 429, 200]) as stub:
        b = backend(stub, monkeypatch)
        assert b.complete(FIXED_MESSAGES) == "ANSWER: chair"
    assert len(stub.bodies) == 3
    assert b.request_count == 3
    assert len(b.delays) == 2
    assert b.delays[0] <= b.delays[1]
    assert 1.0 <= b.delays[0] <= 1.25 and 2.0 <= b.delays[1] <= 2.5


def test_rate_limited_after_retries(monkeypatch):
    with Stub([429] * 10) as stub:
        b = backend(stub, monkeypatch, max_retries=3)
        with pytest.raises(RateLimited):
            b.complete(FIXED_MESSAGES)
    assert len(stub.bodies) == 4  # first try plus three retries


def test_server_errors_are_retried(monkeypatch):
    with Stub([503, 500, 200]) as stub:
        assert backend(stub, monkeypatch).complete(FIXED_MESSAGES) == "ANSWER: chair"
    with Stub([400]) as stub:
        with pytest.raises(TransportFailure):
            backend(stub, monkeypatch).complete(FIXED_MESSAGES)
        assert len(stub.bodies) == 1


@pytest.mark.parametrize("status", [401, 403])
def test_auth_failure_is_not_retried(monkeypatch, status):
    with Stub([status, 200]) as stub:
        with pytest.raises(AuthFailure):
            backend(stub, monkeypatch).complete(FIXED_MESSAGES)
    assert len(stub.bodies) == 1


def test_malformed_response(monkeypatch):
    with Stub([200], body='{"nope": 1}') as stub:
        with pytest.raises(MalformedResponse):
            backend(stub, monkeypatch).complete(FIXED_MESSAGES)


def test_wire_bytes_match_input(monkeypatch):
    with Stub([200]) as stub:
        backend(stub, monkeypatch).complete(FIXED_MESSAGES)
    body = json.loads(stub.bodies[0])
    assert stub.headers[0]["Authorization"] == "Bearer sk-test"
    assert body["model"] == "m" and body["temperature"] == 0.0
    assert body["messages"][0] == {"role": "system", "content": "You are a careful assistant."}
    parts = body["messages"][1]["content"]
    assert parts[0] == {"type": "text", "text": "What is shown?"}
    import base64
    url = parts[1]["image_url"]["url"]
    assert url.startswith("data:image/png;base64,")
    assert base64.b64decode(url.split(",", 1)[1]) == IMAGE


def test_too_many_images(monkeypatch):
    with Stub([]) as stub:
        b = backend(stub, monkeypatch, max_images=1)
        msgs = [ChatMessage("user", (ImagePart(b"a"), ImagePart(b"b")))]
        with pytest.raises(TooManyImages):
            b.complete(msgs)
    assert stub.bodies == []


def test_backoff_non_decreasing():
    cfg = BackendConfig(max_retries=8)
    for seed in range(50):
        d = backoff_delays(cfg, random.Random(seed))
        assert len(d) == 8
        assert all(b >= a for a, b in zip(d, d[1:]))


def test_request_hash_is_stable_across_processes():
    assert request_hash(FIXED_MESSAGES, "gpt-4o-mini", 0.0) == FIXED_HASH
    code = (
        "from chainview.gateway import *\n"
        "m=[ChatMessage.text('system','You are a careful assistant.'),"
        "ChatMessage('user',(TextPart('What is shown?'),ImagePart(bytes(range(256))*4)))]\n"
        "print(request_hash(m,'gpt-4o-mini',0.0))"
    )
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True,
                         env={"PYTHONHASHSEED": "123", "PATH": ""}, check=True)
    assert out.stdout.strip() == FIXED_HASH
    assert request_hash(FIXED_MESSAGES, "other", 0.0) != FIXED_HASH


def test_record_then_replay(tmp_path):
    path = tmp_path / "session.jsonl"
    inner = ScriptedBackend(["one", "two"])
    rec = record_and_replay(path, inner)
    q1 = [ChatMessage.text("user", "first")]
    q2 = [ChatMessage.text("user", "second")]
    assert [rec.complete(q1), rec.complete(q2)] == ["one", "two"]
    assert rec.network_calls == 2
    lines = [json.loads(x) for x in path.read_text().splitlines()]
    assert {"hash", "response", "timestamp"} <= set(lines[0])

    rep = record_and_replay(path)
    assert [rep.complete(q1), rep.complete(q2)] == ["one", "two"]
    assert rep.network_calls == 0
    with pytest.raises(CacheMiss):
        rep.complete([ChatMessage.text("user", "first, altered")])


def test_record_mode_serves_hits_from_cache(tmp_path):
    path = tmp_path / "s.jsonl"
    inner = ScriptedBackend(["one"])
    rec = RecordReplayBackend(path, "record", inner)
    q = [ChatMessage.text("user", "q")]
    assert rec.complete(q) == rec.complete(q) == "one"
    assert inner.request_count == 1


def test_log_form_hashes_images():
    log = message_to_log(FIXED_MESSAGES[1])
    assert "base64" not in json.dumps(log)
    assert any(p.get("image_sha256") for p in log["parts"] if isinstance(p, dict))
