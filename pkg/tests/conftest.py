"""Shared fixtures: toy corpora, a deterministic completion stub server."""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from fallacy_cbr.corpus import Case
from toydata import deterministic_reply, make_toy_cases


@pytest.fixture
def toy_cases() -> list[Case]:
    return make_toy_cases()


class _StubState:
    """Mutable knobs and counters shared with the request handler."""

    def __init__(self):
        self.requests = 0
        self.fail_next = 0        # respond 500 this many times
        self.last_payload: dict | None = None


class _StubHandler(BaseHTTPRequestHandler):
    state: _StubState

    def do_POST(self):
        state = self.state
        state.requests += 1
        length = int(self.headers.get("Content-Length", 0))
        payload = json.loads(self.rfile.read(length))
        state.last_payload = payload
        auth = self.headers.get("Authorization", "")
        if not auth.startswith("Bearer "):
            self.send_response(401)
            self.end_headers()
            return
        if state.fail_next > 0:
            state.fail_next -= 1
            self.send_response(500)
            self.end_headers()
            return
        body = json.dumps(
            {"text": deterministic_reply(payload["prompt"])}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, *args):  # keep pytest output clean
        pass


@pytest.fixture
def stub_endpoint():
    """A local completion endpoint; yields (url, state)."""
    state = _StubState()
    handler = type("Handler", (_StubHandler,), {"state": state})
    server = ThreadingHTTPServer(("127.0.0.1", 0), handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    url = f"http://127.0.0.1:{server.server_address[1]}/complete"
    try:
        yield url, state
    finally:
        server.shutdown()
        thread.join(timeout=5)


@pytest.fixture
def api_key(monkeypatch):
    monkeypatch.setenv("CBR_API_KEY", "test-key")
    return "test-key"
