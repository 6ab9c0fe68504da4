"""Local HTTP fixtures: a component registry and a collateral server."""

from __future__ import annotations

import threading
import time
from collections import Counter
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer


class FixtureServer:
    """Serves static byte bodies by path with an injected delay per request.

    ``hits`` counts requests per path, including misses.
    """

    def __init__(self, routes: dict[str, bytes] | None = None, *, delay: float = 0.0) -> None:
        self.routes: dict[str, bytes] = dict(routes or {})
        self.delay = delay
        self.hits: Counter[str] = Counter()
        self._lock = threading.Lock()
        server = self

        class Handler(BaseHTTPRequestHandler):
            def do_GET(self) -> None:  # noqa: N802
                with server._lock:
                    server.hits[self.path] += 1
                if server.delay:
                    time.sleep(server.delay)
                body = server.routes.get(self.path)
                if body is None:
                    self.send_response(404)
                    self.send_header("Content-Length", "0")
                    self.end_headers()
                    return
                self.send_response(200)
                self.send_header("Content-Type", "application/octet-stream")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                try:
                    self.wfile.write(body)
                except (BrokenPipeError, ConnectionResetError):
                    pass

            def log_message(self, *args) -> None:
                pass

        self._httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._httpd.daemon_threads = True
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)

    @property
    def authority(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"{host}:{port}"

    @property
    def url(self) -> str:
        return f"http://{self.authority}"

    @property
    def total_hits(self) -> int:
        return sum(self.hits.values())

    def start(self) -> FixtureServer:
        self._thread.start()
        return self

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()

    def __enter__(self) -> FixtureServer:
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def registry_server(components: dict[str, bytes], *, delay: float = 0.0) -> FixtureServer:
    """Registry serving ``{"name:tag": bytes}`` at ``/v1/components/<name>/<tag>``."""
    routes = {}
    for ref, data in components.items():
        name, tag = ref.rsplit(":", 1)
        routes[f"/v1/components/{name}/{tag}"] = data
    return FixtureServer(routes, delay=delay)
