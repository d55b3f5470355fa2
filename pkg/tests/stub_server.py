"""Deterministic chat-completion stub server for tests.

Implements the same wire format as a real endpoint: POST
``/v1/chat/completions`` with ``{model, messages, temperature, max_tokens,
logprobs}``, answering ``{choices: [{message: {content}, logprobs?}]}``.
Behaviour is scripted per request, failures and latency are injectable,
and counters expose total hits and the in-flight high-water mark.
"""

from __future__ import annotations

import hashlib
import json
import math
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable

# A script maps the parsed request body to a reply dict with keys:
#   text: str              completion content (required unless status set)
#   logprobs: dict | None  wire logprobs payload
#   status: int            force this HTTP status instead of answering
#   delay_s: float         extra per-response latency
Script = Callable[[dict], dict]


def echo_script(request: dict) -> dict:
    return {"text": request["messages"][-1]["content"]}


def fixed_script(text: str) -> Script:
    return lambda request: {"text": text}


def sequence_script(texts: list[str]) -> Script:
    """Replies cycle through the list in request order."""
    state = {"i": 0}
    lock = threading.Lock()

    def _script(request: dict) -> dict:
        with lock:
            text = texts[state["i"] % len(texts)]
            state["i"] += 1
        return {"text": text}

    return _script


def digest_pick(content: str, choices: list[str], salt: str = "") -> str:
    """Stable pseudo-random pick from choices keyed on the prompt text."""
    digest = hashlib.sha256((salt + content).encode("utf-8")).digest()
    return choices[int.from_bytes(digest[:4], "big") % len(choices)]


def digest_unit(content: str, salt: str = "") -> float:
    """Stable pseudo-random float in (0, 1) keyed on the prompt text."""
    digest = hashlib.sha256((salt + content).encode("utf-8")).digest()
    return (int.from_bytes(digest[:4], "big") % 997 + 1) / 999.0


def yes_no_logprobs(p_yes: float) -> dict:
    """Wire-format logprobs for a first token choosing yes vs no."""
    return {
        "content": [
            {
                "token": "yes" if p_yes >= 0.5 else "no",
                "logprob": math.log(max(p_yes, 1 - p_yes)),
                "top_logprobs": [
                    {"token": "yes", "logprob": math.log(p_yes)},
                    {"token": "no", "logprob": math.log(1 - p_yes)},
                ],
            }
        ]
    }


class _Handler(BaseHTTPRequestHandler):
    server: "StubServer"

    def log_message(self, *args):  # keep pytest output clean
        pass

    def do_POST(self):
        srv = self.server
        with srv.state_lock:
            srv.hits += 1
            srv.in_flight += 1
            srv.high_water_mark = max(srv.high_water_mark, srv.in_flight)
            fail = srv.fail_remaining > 0
            if fail:
                srv.fail_remaining -= 1
        try:
            length = int(self.headers.get("Content-Length", 0))
            request = json.loads(self.rfile.read(length)) if length else {}
            if self.path != "/v1/chat/completions":
                self._send(404, {"error": "unknown path"})
                return
            if fail:
                time.sleep(srv.latency_s)
                self._send(srv.fail_status, {"error": "injected failure"})
                return
            reply = srv.script(request)
            time.sleep(srv.latency_s + reply.get("delay_s", 0.0))
            status = reply.get("status")
            if status is not None:
                self._send(status, {"error": "scripted failure"})
                return
            if reply.get("raw_body") is not None:
                self._send_raw(200, reply["raw_body"])
                return
            choice = {"message": {"role": "assistant", "content": reply["text"]}}
            if request.get("logprobs") and reply.get("logprobs") is not None:
                choice["logprobs"] = reply["logprobs"]
            self._send(200, {"choices": [choice]})
        finally:
            with srv.state_lock:
                srv.in_flight -= 1

    def _send(self, status: int, doc: dict):
        self._send_raw(status, json.dumps(doc).encode("utf-8"))

    def _send_raw(self, status: int, body: bytes):
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)


class StubServer(ThreadingHTTPServer):
    """In-process endpoint double; start() returns, serve runs on a thread."""

    daemon_threads = True

    def __init__(self, script: Script | None = None, latency_s: float = 0.0,
                 fail_first: int = 0, fail_status: int = 500):
        super().__init__(("127.0.0.1", 0), _Handler)
        self.script = script or echo_script
        self.latency_s = latency_s
        self.fail_remaining = fail_first
        self.fail_status = fail_status
        self.state_lock = threading.Lock()
        self.hits = 0
        self.in_flight = 0
        self.high_water_mark = 0
        self._thread: threading.Thread | None = None

    @property
    def base_url(self) -> str:
        host, port = self.server_address
        return f"http://{host}:{port}"

    def start(self) -> str:
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self.base_url

    def stop(self):
        self.shutdown()
        self.server_close()
        if self._thread:
            self._thread.join(timeout=5)
