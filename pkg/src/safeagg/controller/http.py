"""JSON-over-HTTP front end for :class:`Controller` (stdlib server).

Every endpoint is ``POST /<operation>`` with a JSON object body. Errors come
back with a non-200 status and ``{"error": code, "message": text}``.
"""

from __future__ import annotations

import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from ..errors import BadRequest, ControllerError
from .core import Controller

log = logging.getLogger(__name__)


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    # headers and body go out as separate writes; without this each reply waits on a delayed ACK
    disable_nagle_algorithm = True
    server: "_Server"

    def do_POST(self):  # noqa: N802
        endpoint = self.path.strip("/").split("?", 1)[0]
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length) if length else b""
        try:
            try:
                data = json.loads(raw) if raw else {}
            except ValueError:
                raise BadRequest("body is not JSON") from None
            if not isinstance(data, dict):
                raise BadRequest("body must be a JSON object")
            status, result = 200, self.server.controller.dispatch(endpoint, data)
        except ControllerError as exc:
            status, result = exc.status, {"error": exc.code, "message": exc.message}
        except Exception:  # noqa: BLE001
            log.exception("controller failure on /%s", endpoint)
            status, result = 500, {"error": "internal", "message": "internal error"}
        body = json.dumps(result).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, fmt, *args):
        log.debug("%s " + fmt, self.address_string(), *args)


class _Server(ThreadingHTTPServer):
    daemon_threads = True
    request_queue_size = 512

    def __init__(self, addr, controller: Controller):
        super().__init__(addr, _Handler)
        self.controller = controller


class ControllerServer:
    """Run a controller over HTTP on a background thread.

    >>> with ControllerServer(Controller()) as srv:   # doctest: +SKIP
    ...     requests.post(srv.url + "/get_average", json={})
    """

    def __init__(self, controller: Controller, host: str = "127.0.0.1", port: int = 0):
        self.controller = controller
        self._httpd = _Server((host, port), controller)
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "ControllerServer":
        self._thread = threading.Thread(target=self._httpd.serve_forever, name="controller-http", daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._httpd.serve_forever()

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
