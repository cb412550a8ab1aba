"""Client side of the controller API.

A transport moves one JSON request to the controller and returns the JSON
reply. :class:`ControllerClient` layers the named operations and the
long-poll loop on top of any transport.
"""

from __future__ import annotations

import http.client
import json
import threading
import time
from typing import Protocol
from urllib.parse import urlsplit

from ..errors import ERROR_CODES, ControllerError, ControllerUnreachable, UnknownNode
from .core import Controller


class Transport(Protocol):
    def call(self, endpoint: str, payload: dict) -> dict: ...


class LoopbackTransport:
    """In-process transport. Payloads round-trip through JSON like on the wire.

    ``delay`` is slept before every request to emulate link latency.
    """

    def __init__(self, controller: Controller, delay: float = 0.0):
        self.controller = controller
        self.delay = delay

    def call(self, endpoint: str, payload: dict) -> dict:
        if self.delay:
            time.sleep(self.delay)
        request = json.loads(json.dumps(payload))
        return json.loads(json.dumps(self.controller.dispatch(endpoint, request)))


class HttpTransport:
    """One persistent HTTP/1.1 connection to the controller.

    Uses the stdlib client: at desk scale per-request CPU cost dominates round
    time, and it is several times cheaper than a full-featured session.
    """

    def __init__(self, url: str, delay: float = 0.0, timeout: float | None = None):
        parts = urlsplit(url)
        if parts.scheme != "http" or not parts.hostname:
            raise ValueError(f"expected an http://host:port URL, got {url!r}")
        self.url = url.rstrip("/")
        self.delay = delay
        self._conn = http.client.HTTPConnection(parts.hostname, parts.port or 80, timeout=timeout)
        self._lock = threading.Lock()

    def call(self, endpoint: str, payload: dict) -> dict:
        if self.delay:
            time.sleep(self.delay)
        body = json.dumps(payload).encode("utf-8")
        with self._lock:
            try:
                self._conn.request("POST", f"/{endpoint}", body, {"Content-Type": "application/json"})
                resp = self._conn.getresponse()
                raw = resp.read()
            except (OSError, http.client.HTTPException) as exc:
                self._conn.close()
                raise ControllerUnreachable(f"{self.url}: {exc}") from exc
        try:
            reply = json.loads(raw)
        except ValueError:
            raise ControllerUnreachable(f"non-JSON reply from {endpoint}: {resp.status}") from None
        if resp.status != 200:
            cls = ERROR_CODES.get(reply.get("error"), ControllerError)
            raise cls(reply.get("message", ""))
        return reply

    def close(self) -> None:
        self._conn.close()


class ControllerClient:
    def __init__(self, transport: Transport):
        self.transport = transport

    def call(self, endpoint: str, payload: dict | None = None) -> dict:
        return self.transport.call(endpoint, payload or {})

    def long_poll(self, endpoint: str, payload: dict, deadline: float | None = None) -> dict:
        """Keep one logical request open until it yields data or ``deadline`` passes.

        Re-issued requests carry ``continuation`` so the controller does not
        count them as new protocol messages.
        """
        first = True
        while True:
            body = dict(payload)
            if deadline is not None:
                body["wait"] = max(0.0, deadline - time.monotonic())
            if not first:
                body["continuation"] = True
            result = self.call(endpoint, body)
            first = False
            if result.get("status") != "empty":
                return result
            if deadline is None or time.monotonic() >= deadline:
                return result

    # keys

    def register_key(self, node: int, key: str) -> dict:
        return self.call("register_key", {"node": node, "key": key})

    def get_key(self, node: int) -> str:
        return self.call("get_key", {"node": node})["key"]

    def wait_key(self, node: int, deadline: float, interval: float = 0.05) -> str:
        """``get_key``, retried until the node has registered."""
        while True:
            try:
                return self.get_key(node)
            except UnknownNode:
                if time.monotonic() >= deadline:
                    raise
                time.sleep(interval)

    def post_keys(self, node: int, keys: dict[int, str]) -> dict:
        return self.call("post_keys", {"node": node, "keys": {str(k): v for k, v in keys.items()}})

    def get_keys(self, node: int, from_node: int, deadline: float | None = None) -> dict:
        return self.long_poll("get_keys", {"node": node, "from_node": from_node}, deadline)

    def configure_group(self, group: int, chain, force: bool = False) -> dict:
        payload = {"group": group, "chain": list(chain)}
        if force:
            payload["force"] = True
        return self.call("configure_group", payload)

    # chain protocol

    def post_aggregate(self, from_node: int, to_node: int, aggregate: str, group: int = 1) -> dict:
        return self.call(
            "post_aggregate",
            {"from_node": from_node, "to_node": to_node, "aggregate": aggregate, "group": group},
        )

    def check_aggregate(self, node: int, group: int = 1, deadline: float | None = None) -> dict:
        return self.long_poll("check_aggregate", {"node": node, "group": group}, deadline)

    def get_aggregate(self, node: int, group: int = 1, deadline: float | None = None) -> dict:
        return self.long_poll("get_aggregate", {"node": node, "group": group}, deadline)

    def post_average(self, average, node: int, group: int = 1, status: str | None = None) -> dict:
        payload = {"average": list(average), "node": node, "group": group}
        if status is not None:
            payload["status"] = status
        return self.call("post_average", payload)

    def get_average(self, deadline: float | None = None) -> dict:
        return self.long_poll("get_average", {}, deadline)

    def should_initiate(self, node: int, group: int = 1) -> dict:
        return self.call("should_initiate", {"node": node, "group": group})

    # monitor

    def monitor_state(self, group: int | None = None) -> dict:
        return self.call("monitor_state", {} if group is None else {"group": group})

    def direct_repost(self, group: int, node: int, to_node: int, failed_node: int | None = None) -> dict:
        payload = {"group": group, "node": node, "to_node": to_node}
        if failed_node is not None:
            payload["failed_node"] = failed_node
        return self.call("direct_repost", payload)

    def mark_skipped(self, group: int, node: int) -> dict:
        return self.call("mark_skipped", {"group": group, "node": node})

    # baseline

    def insec_post(self, node: int, values) -> dict:
        return self.call("insec_post", {"node": node, "values": list(values)})

    def insec_average(self, deadline: float | None = None, expected: int | None = None) -> dict:
        return self.long_poll("insec_average", {} if expected is None else {"expected": expected}, deadline)

    # admin

    def stats(self) -> dict:
        return self.call("stats")

    def reset(self) -> dict:
        return self.call("reset")
