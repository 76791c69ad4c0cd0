"""HTTP facade over a debug session for the browser console.

Endpoints:

    GET  /api/ranks                 state snapshot (JSON)
    POST /api/ranks/<r>/command     body {"cmd": "<MDWP line>"}
    POST /api/broadcast             body {"cmd": "<MDWP line>"}
    GET  /api/events                server-sent events, one JSON object per
                                    `data:` line, with periodic keepalives
    GET  /<path>                    static files from the console bundle

Everything is stdlib; the server threads per request so a long-lived
event stream never blocks command traffic.
"""
from __future__ import annotations

import json
import queue
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Optional

from .debug_client import Session
from .errors import GatewayError

KEEPALIVE_S = 1.0

_CONTENT_TYPES = {
    ".html": "text/html; charset=utf-8",
    ".js": "text/javascript; charset=utf-8",
    ".css": "text/css; charset=utf-8",
    ".map": "application/json",
    ".json": "application/json",
    ".svg": "image/svg+xml",
}


class GatewayServer:
    def __init__(self, session: Session, port: int, static_dir: Optional[str] = None):
        self.session = session
        self.static_dir = Path(static_dir).resolve() if static_dir else None
        handler = _make_handler(self)
        try:
            self._httpd = ThreadingHTTPServer(("127.0.0.1", port), handler)
        except OSError as exc:
            raise GatewayError(f"cannot bind gateway port {port}: {exc}") from exc
        self._httpd.daemon_threads = True
        self.port = self._httpd.server_address[1]
        self._thread = threading.Thread(
            target=self._httpd.serve_forever, name="mpx-gateway", daemon=True
        )

    def start(self) -> "GatewayServer":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()


def serve_gateway(session: Session, port: int, static_dir: Optional[str] = None) -> GatewayServer:
    return GatewayServer(session, port, static_dir).start()


def _make_handler(gateway: GatewayServer):
    session = gateway.session

    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        # quiet: the test suite drives this server hard
        def log_message(self, fmt, *args):  # noqa: D102
            pass

        def _send_json(self, status: int, body: dict) -> None:
            data = json.dumps(body).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def _read_cmd(self) -> Optional[str]:
            length = self.headers.get("Content-Length")
            if length is None or not length.isdigit():
                return None
            try:
                body = json.loads(self.rfile.read(int(length)).decode("utf-8"))
            except (ValueError, UnicodeDecodeError):
                return None
            cmd = body.get("cmd") if isinstance(body, dict) else None
            if not isinstance(cmd, str) or not cmd.strip() or "\n" in cmd:
                return None
            return cmd.strip()

        def do_GET(self) -> None:  # noqa: N802
            if self.path == "/api/ranks":
                self._send_json(200, session.snapshot())
            elif self.path == "/api/events":
                self._stream_events()
            else:
                self._serve_static()

        def do_POST(self) -> None:  # noqa: N802
            parts = [p for p in self.path.split("/") if p]
            if parts == ["api", "broadcast"]:
                cmd = self._read_cmd()
                if cmd is None:
                    self._send_json(400, {"error": "body must be {\"cmd\": \"...\"}"})
                    return
                results = session.broadcast(cmd)
                self._send_json(
                    200,
                    {
                        "responses": {
                            str(rank): resp.all_lines() for rank, resp in results.items()
                        }
                    },
                )
                return
            if (
                len(parts) == 4
                and parts[0] == "api"
                and parts[1] == "ranks"
                and parts[3] == "command"
            ):
                if not parts[2].isdigit() or int(parts[2]) not in session.connections:
                    self._send_json(404, {"error": f"unknown rank {parts[2]}"})
                    return
                cmd = self._read_cmd()
                if cmd is None:
                    self._send_json(400, {"error": "body must be {\"cmd\": \"...\"}"})
                    return
                response = session.command(int(parts[2]), cmd)
                self._send_json(200, {"response": response.all_lines()})
                return
            self._send_json(404, {"error": "no such endpoint"})

        def _stream_events(self) -> None:
            events: "queue.Queue[dict]" = queue.Queue()
            cancel = session.subscribe(events.put)
            try:
                self.send_response(200)
                self.send_header("Content-Type", "text/event-stream")
                self.send_header("Cache-Control", "no-cache")
                self.send_header("Connection", "close")
                self.end_headers()
                while True:
                    try:
                        event = events.get(timeout=KEEPALIVE_S)
                        payload = f"data: {json.dumps(event)}\n\n"
                    except queue.Empty:
                        payload = ": keepalive\n\n"
                    self.wfile.write(payload.encode("utf-8"))
                    self.wfile.flush()
            except OSError:
                pass  # client went away
            finally:
                cancel()

        def _serve_static(self) -> None:
            root = gateway.static_dir
            if root is None:
                self._send_json(404, {"error": "no static bundle configured"})
                return
            rel = self.path.split("?", 1)[0].lstrip("/") or "index.html"
            target = (root / rel).resolve()
            # stay inside the bundle directory
            if not target.is_relative_to(root) or not target.is_file():
                self._send_json(404, {"error": f"no such file {rel}"})
                return
            data = target.read_bytes()
            self.send_response(200)
            ctype = _CONTENT_TYPES.get(target.suffix, "application/octet-stream")
            self.send_header("Content-Type", ctype)
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

    return Handler
