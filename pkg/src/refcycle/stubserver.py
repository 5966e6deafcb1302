"""Scripted stand-in for a remote vision-language endpoint.

The server replays canned responses keyed by the image reference in each
request: REG-marked prompts get the scripted caption, REC-marked prompts get
the scripted localization text. A /stats endpoint exposes request counts so
tests can prove that resumed runs issue no duplicates.

Run standalone with:  python -m refcycle.stubserver --script script.json --port 8808
"""

from __future__ import annotations

import argparse
import json
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path


@dataclass
class StubScript:
    """Per-image canned responses plus optional failure injection."""

    by_image: dict[str, dict]
    reg_marker: str = "[REG]"
    rec_marker: str = "[REC]"
    require_token: str | None = None
    fail_first_n: int = 0  # respond 500 to the first n requests

    @classmethod
    def load(cls, path: str | Path) -> "StubScript":
        with open(path, "r", encoding="utf-8") as f:
            d = json.load(f)
        return cls(
            by_image=d["by_image"],
            reg_marker=d.get("reg_marker", "[REG]"),
            rec_marker=d.get("rec_marker", "[REC]"),
            require_token=d.get("require_token"),
            fail_first_n=int(d.get("fail_first_n", 0)),
        )


@dataclass
class StubStats:
    n_requests: int = 0
    by_key: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"n_requests": self.n_requests, "by_key": dict(self.by_key)}


class _Handler(BaseHTTPRequestHandler):
    # self.server carries .script, .stats and .lock (set by StubServer)

    def log_message(self, *args) -> None:  # keep test output quiet
        pass

    def _send(self, code: int, payload: dict) -> None:
        body = json.dumps(payload).encode()
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self) -> None:
        if self.path == "/stats":
            with self.server.lock:
                self._send(200, self.server.stats.to_dict())
        else:
            self._send(404, {"error": "unknown path"})

    def do_POST(self) -> None:
        script = self.server.script
        length = int(self.headers.get("Content-Length", 0))
        try:
            req = json.loads(self.rfile.read(length).decode())
        except json.JSONDecodeError:
            self._send(400, {"error": "bad json"})
            return

        if script.require_token is not None:
            auth = self.headers.get("Authorization", "")
            if auth != f"Bearer {script.require_token}":
                self._send(401, {"error": "unauthorized"})
                return

        prompt = req.get("prompt", "")
        image = req.get("image", "")
        leg = "reg" if script.reg_marker in prompt else "rec" if script.rec_marker in prompt else "?"

        with self.server.lock:
            self.server.stats.n_requests += 1
            key = f"{image}:{leg}"
            self.server.stats.by_key[key] = self.server.stats.by_key.get(key, 0) + 1
            n = self.server.stats.n_requests
        if n <= script.fail_first_n:
            self._send(500, {"error": "injected failure"})
            return

        entry = script.by_image.get(image)
        if entry is None:
            self._send(200, {"text": "unknown image"})
            return
        text = entry["caption"] if leg == "reg" else entry.get("rec_text", "")
        self._send(200, {"text": text})


class StubServer:
    """Threaded HTTP server wrapper; start() returns the bound port."""

    def __init__(self, script: StubScript, port: int = 0, host: str = "127.0.0.1"):
        self.script = script
        self.stats = StubStats()
        self.lock = threading.Lock()
        self._httpd = ThreadingHTTPServer((host, port), _Handler)
        self._httpd.script = script  # type: ignore[attr-defined]
        self._httpd.stats = self.stats  # type: ignore[attr-defined]
        self._httpd.lock = self.lock  # type: ignore[attr-defined]
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        return self._httpd.server_address[1]

    @property
    def url(self) -> str:
        return f"http://127.0.0.1:{self.port}/"

    def start(self) -> "StubServer":
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread:
            self._thread.join(timeout=5)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="scripted endpoint stub")
    parser.add_argument("--script", required=True, help="JSON script file")
    parser.add_argument("--port", type=int, default=8808)
    args = parser.parse_args(argv)
    server = StubServer(StubScript.load(args.script), port=args.port)
    server.start()
    print(f"stub server listening on {server.url}", flush=True)
    try:
        server._thread.join()
    except KeyboardInterrupt:
        server.stop()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
