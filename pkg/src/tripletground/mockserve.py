"""Stdlib HTTP server exposing any in-process backend over the wire protocol.

Lets the HTTP client path be exercised hermetically: `serve-mock` wraps a
MockBackend, and tests can wrap a LabeledMockBackend. Vectors are emitted
with json.dumps, whose shortest-repr floats round-trip bit-exactly.
"""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .core import BBox, ImageRef
from .gateway import EmbeddingBackend, InvalidRegionError, RegionRequest


def _make_handler(backend: EmbeddingBackend):
    class ProtocolHandler(BaseHTTPRequestHandler):
        def log_message(self, fmt, *args):  # keep test output quiet
            pass

        def _reply(self, status: int, payload: dict) -> None:
            body = json.dumps(payload).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_GET(self):
            if self.path == "/v1/info":
                self._reply(200, {"name": backend.name, "dimension": backend.dimension})
            else:
                self._reply(404, {"error": f"unknown path {self.path}"})

        def do_POST(self):
            length = int(self.headers.get("Content-Length", "0"))
            try:
                payload = json.loads(self.rfile.read(length))
            except json.JSONDecodeError:
                self._reply(400, {"error": "invalid JSON body"})
                return
            try:
                if self.path == "/v1/embed/text":
                    texts = payload["texts"]
                    if not isinstance(texts, list) or not all(
                        isinstance(t, str) and t for t in texts
                    ):
                        raise ValueError("texts must be non-empty strings")
                    self._reply(200, {"vectors": backend.embed_texts(texts)})
                elif self.path == "/v1/embed/region":
                    img = payload["image"]
                    image = ImageRef(
                        id=img["id"],
                        width=int(img["width"]),
                        height=int(img["height"]),
                        uri=img.get("uri"),
                    )
                    requests_ = [
                        RegionRequest(
                            image=image,
                            boxes=tuple(BBox(*b) for b in item["boxes"]),
                            render=item["render"],
                        )
                        for item in payload["requests"]
                    ]
                    self._reply(200, {"vectors": backend.embed_regions(image, requests_)})
                else:
                    self._reply(404, {"error": f"unknown path {self.path}"})
            except (InvalidRegionError, ValueError, KeyError, TypeError) as exc:
                self._reply(400, {"error": str(exc)})

    return ProtocolHandler


class ProtocolServer:
    """Threaded protocol server around an in-process backend."""

    def __init__(self, backend: EmbeddingBackend, host: str = "127.0.0.1", port: int = 0):
        self._server = ThreadingHTTPServer((host, port), _make_handler(backend))
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "ProtocolServer":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()

    def __enter__(self) -> "ProtocolServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    def serve_forever(self) -> None:
        self._thread.start()
        self._thread.join()
