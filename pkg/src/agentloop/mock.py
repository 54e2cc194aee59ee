"""In-process mock HTTP servers for offline testing of the wire protocols."""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple


def canned_message(content: str, prompt_tokens: int = 10, completion_tokens: int = 5) -> dict:
    return {
        "choices": [{"message": {"role": "assistant", "content": content}}],
        "usage": {"prompt_tokens": prompt_tokens, "completion_tokens": completion_tokens},
    }


def canned_tool_call(name: str, arguments: Mapping[str, Any]) -> dict:
    return {
        "choices": [
            {
                "message": {
                    "role": "assistant",
                    "content": None,
                    "tool_calls": [
                        {
                            "id": "call_1",
                            "type": "function",
                            "function": {"name": name, "arguments": json.dumps(dict(arguments))},
                        }
                    ],
                }
            }
        ],
        "usage": {"prompt_tokens": 10, "completion_tokens": 5},
    }


class _MockServerBase:
    def __init__(self):
        self.hits = 0
        self.requests: List[dict] = []
        self._server: Optional[ThreadingHTTPServer] = None
        self._thread: Optional[threading.Thread] = None

    def _make_handler(self):
        raise NotImplementedError

    @property
    def base_url(self) -> str:
        host, port = self._server.server_address
        return f"http://{host}:{port}"

    def start(self) -> "_MockServerBase":
        self._server = ThreadingHTTPServer(("127.0.0.1", 0), self._make_handler())
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


class MockChatServer(_MockServerBase):
    """Chat-completions stub.

    Canned mode: `enqueue()` (status, body) pairs, served in order; the last
    entry repeats once the queue is exhausted. Replay mode: serve bodies from
    a recorded exchange list keyed by request order. All exchanges are
    recorded on `exchanges` either way.
    """

    def __init__(self, responses: Optional[List[Tuple[int, dict]]] = None):
        super().__init__()
        self._queue: List[Tuple[int, dict]] = list(responses or [])
        self.exchanges: List[Dict[str, Any]] = []
        self._lock = threading.Lock()

    def enqueue(self, body: dict, status: int = 200) -> None:
        self._queue.append((status, body))

    @staticmethod
    def replaying(exchanges: List[Mapping[str, Any]]) -> "MockChatServer":
        server = MockChatServer()
        for ex in exchanges:
            server.enqueue(ex["response"], int(ex.get("status", 200)))
        return server

    def _next_response(self) -> Tuple[int, dict]:
        with self._lock:
            if not self._queue:
                return 500, {"error": "mock queue empty"}
            if len(self._queue) == 1:
                return self._queue[0]
            return self._queue.pop(0)

    def _make_handler(self):
        server = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                raw = self.rfile.read(length)
                try:
                    request_body = json.loads(raw) if raw else {}
                except json.JSONDecodeError:
                    request_body = {"raw": raw.decode("utf-8", "replace")}
                status, body = server._next_response()
                with server._lock:
                    server.hits += 1
                    server.requests.append(request_body)
                    server.exchanges.append({"request": request_body, "status": status, "response": body})
                payload = json.dumps(body).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)

        return Handler


class MockToolExecutorServer(_MockServerBase):
    """Remote tool executor stub: GET /tools lists specs, POST /call executes.

    Execution is delegated to a callable `(name, arguments) -> (ok, payload_or_error)`.
    """

    def __init__(self, tool_specs: List[dict], call_fn: Callable[[str, dict], Tuple[bool, Any]]):
        super().__init__()
        self.tool_specs = tool_specs
        self.call_fn = call_fn
        self._lock = threading.Lock()

    def _make_handler(self):
        server = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def _send(self, status: int, body: dict):
                payload = json.dumps(body).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)

            def do_GET(self):
                with server._lock:
                    server.hits += 1
                if self.path == "/tools":
                    self._send(200, {"tools": server.tool_specs})
                else:
                    self._send(404, {"error": "not found"})

            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                body = json.loads(self.rfile.read(length) or b"{}")
                with server._lock:
                    server.hits += 1
                    server.requests.append(body)
                if self.path != "/call":
                    self._send(404, {"error": "not found"})
                    return
                ok, result = server.call_fn(body.get("name", ""), body.get("arguments", {}))
                if ok:
                    self._send(200, {"ok": True, "payload": result})
                else:
                    self._send(200, {"ok": False, "error": str(result)})

        return Handler
