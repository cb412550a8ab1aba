"""The aggregation controller: a message broker plus progress bookkeeping.

The controller never sees plaintext in SAFE mode. It stores opaque aggregate
strings addressed to a node, tells senders whether their post was consumed or
must be re-sent elsewhere, counts contributions, elects a replacement
initiator when a round goes stale and averages the per-group results.

Every operation goes through :meth:`Controller.dispatch`, which is what both
the loopback and the HTTP transports call. Long-polling operations follow the
usual shape: check immediately, then re-check at most every ``yield_time``
until ``poll_time`` has passed, never holding the state lock while asleep.
"""

from __future__ import annotations

import copy
import json
import logging
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from ..errors import (
    BadRequest,
    ChainConflict,
    NotInitiator,
    SelfSend,
    StaleEpoch,
    UnknownNode,
)

log = logging.getLogger(__name__)

PROTOCOL_ENDPOINTS = (
    "post_aggregate",
    "check_aggregate",
    "get_aggregate",
    "post_average",
    "get_average",
    "should_initiate",
)
KEY_ENDPOINTS = ("register_key", "get_key", "post_keys", "get_keys")
MONITOR_ENDPOINTS = ("monitor_state", "direct_repost", "mark_skipped")
INSEC_ENDPOINTS = ("insec_post", "insec_average")
ADMIN_ENDPOINTS = ("configure_group", "reset", "stats")

EMPTY = {"status": "empty"}

PENDING = "pending"
POSTED = "posted"
ABORTED = "aborted"


@dataclass(frozen=True)
class PollConfig:
    poll_time: float = 30.0
    yield_time: float = 0.1
    aggregation_timeout: float = 60.0

    def __post_init__(self):
        if not 0 < self.yield_time < self.poll_time < self.aggregation_timeout:
            raise ValueError("need 0 < yield_time < poll_time < aggregation_timeout")


class SystemClock:
    def now(self) -> float:
        return time.monotonic()

    def wait(self, cond: threading.Condition, timeout: float) -> None:
        cond.wait(timeout)


class VirtualClock:
    """Manually driven time. ``wait`` advances the clock instead of sleeping.

    Only meaningful when a single thread drives the controller.
    """

    def __init__(self, start: float = 0.0):
        self._now = start

    def now(self) -> float:
        return self._now

    def advance(self, dt: float) -> None:
        self._now += dt

    def wait(self, cond: threading.Condition, timeout: float) -> None:
        self._now += timeout


@dataclass
class MailboxEntry:
    aggregate: Any
    from_node: int
    time: float


@dataclass
class AverageRecord:
    initiator: int
    time: float
    status: str = PENDING
    average: list[float] | None = None
    contributors: int = 0


@dataclass
class GroupState:
    chain: tuple[int, ...] | None = None
    mailbox: dict[int, MailboxEntry] = field(default_factory=dict)
    repost_status: dict[int, dict] = field(default_factory=dict)
    posted: int = 0
    skipped: int = 0
    skipped_nodes: set[int] = field(default_factory=set)
    excluded: set[int] = field(default_factory=set)
    record: AverageRecord | None = None
    attempt: int = 0

    def require_member(self, node: int) -> None:
        if self.chain is not None and node not in self.chain:
            raise UnknownNode(f"node {node} is not in this group's chain")


def _int(data: dict, name: str) -> int:
    try:
        value = data[name]
    except KeyError:
        raise BadRequest(f"missing field {name!r}") from None
    if isinstance(value, bool) or not isinstance(value, (int, str)):
        raise BadRequest(f"field {name!r} must be an integer")
    try:
        return int(value)
    except ValueError:
        raise BadRequest(f"field {name!r} must be an integer") from None


def _group(data: dict) -> int:
    return _int(data, "group") if "group" in data else 1


class Controller:
    def __init__(
        self,
        config: PollConfig = PollConfig(),
        *,
        clock=None,
        weighted_groups: bool = False,
        exclude_failed_initiator: bool = True,
        journal: str | None = None,
    ):
        self.config = config
        self.clock = clock or SystemClock()
        self.weighted_groups = weighted_groups
        self.exclude_failed_initiator = exclude_failed_initiator
        self._journal_path = journal
        self._lock = threading.Lock()
        self._conds: dict[tuple, threading.Condition] = {}
        self._stats_lock = threading.Lock()
        self.calls: Counter[str] = Counter()
        self.continuations: Counter[str] = Counter()
        self.listeners: list[Callable[[str, dict], None]] = []
        self._routes = {
            "register_key": self.register_key,
            "get_key": self.get_key,
            "post_keys": self.post_keys,
            "get_keys": self.get_keys,
            "configure_group": self.configure_group,
            "post_aggregate": self.post_aggregate,
            "check_aggregate": self.check_aggregate,
            "get_aggregate": self.get_aggregate,
            "post_average": self.post_average,
            "get_average": self.get_average,
            "should_initiate": self.should_initiate,
            "direct_repost": self.direct_repost,
            "mark_skipped": self.mark_skipped,
            "monitor_state": self.monitor_state,
            "insec_post": self.insec_post,
            "insec_average": self.insec_average,
            "reset": self.reset,
            "stats": self.stats,
        }
        self._clear_state()

    def _clear_state(self) -> None:
        self.keys: dict[int, str] = {}
        self.preneg: dict[tuple[int, int], str] = {}
        self.groups: dict[int, GroupState] = {}
        self.insec_values: dict[int, list[float]] = {}

    # plumbing ------------------------------------------------------------------

    def dispatch(self, endpoint: str, data: dict | None = None) -> dict:
        try:
            handler = self._routes[endpoint]
        except KeyError:
            raise BadRequest(f"unknown endpoint {endpoint!r}") from None
        data = dict(data or {})
        continuation = bool(data.pop("continuation", False))
        with self._stats_lock:
            self.calls[endpoint] += 1
            if continuation:
                self.continuations[endpoint] += 1
        return handler(data)

    def message_count(self, endpoints=PROTOCOL_ENDPOINTS) -> int:
        """Protocol messages: calls on ``endpoints``, minus long-poll re-issues."""
        with self._stats_lock:
            return sum(self.calls[e] - self.continuations[e] for e in endpoints)

    def messages_by_endpoint(self) -> dict[str, int]:
        with self._stats_lock:
            return {e: self.calls[e] - self.continuations[e] for e in self.calls}

    def reset_stats(self) -> None:
        with self._stats_lock:
            self.calls.clear()
            self.continuations.clear()

    def _cond(self, key: tuple) -> threading.Condition:
        cond = self._conds.get(key)
        if cond is None:
            cond = self._conds.setdefault(key, threading.Condition(self._lock))
        return cond

    def _notify(self, key: tuple) -> None:
        cond = self._conds.get(key)
        if cond is not None:
            cond.notify_all()

    def _poll(self, key: tuple, fn: Callable[[], dict], data: dict) -> dict:
        window = self.config.poll_time
        if data.get("wait") is not None:
            window = max(0.0, min(window, float(data["wait"])))
        cond = self._cond(key)
        start = self.clock.now()
        with self._lock:
            result = fn()
            while result.get("status") == "empty":
                remaining = window - (self.clock.now() - start)
                if remaining <= 0:
                    break
                self.clock.wait(cond, min(self.config.yield_time, remaining))
                result = fn()
        return result

    def _emit(self, event: str, info: dict) -> None:
        if self._journal_path:
            line = json.dumps({"t": time.time(), "event": event, **info})
            with open(self._journal_path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")
        for listener in list(self.listeners):
            listener(event, info)

    def _group_state(self, group: int) -> GroupState:
        gs = self.groups.get(group)
        if gs is None:
            gs = self.groups[group] = GroupState()
        return gs

    def _begin_attempt(self, gs: GroupState, initiator: int, *, clear: bool) -> None:
        gs.record = AverageRecord(initiator=initiator, time=self.clock.now())
        gs.posted = 0
        gs.skipped = 0
        gs.skipped_nodes.clear()
        gs.attempt += 1
        if clear:
            gs.mailbox.clear()
            gs.repost_status.clear()

    def snapshot(self) -> dict:
        """Deep copy of everything the controller holds; used by tests."""
        with self._lock:
            return {
                "keys": dict(self.keys),
                "preneg": {f"{a}->{b}": v for (a, b), v in self.preneg.items()},
                "groups": {g: copy.deepcopy(gs) for g, gs in self.groups.items()},
                "insec": copy.deepcopy(self.insec_values),
            }

    # setup ---------------------------------------------------------------------

    def configure_group(self, data: dict) -> dict:
        group = _group(data)
        try:
            chain = tuple(int(n) for n in data["chain"])
        except (KeyError, TypeError, ValueError):
            raise BadRequest("chain must be a list of node ids") from None
        if len(chain) < 3 or len(set(chain)) != len(chain):
            raise BadRequest("a chain needs at least 3 distinct nodes")
        with self._lock:
            gs = self._group_state(group)
            if gs.chain is not None and gs.chain != chain and not data.get("force"):
                raise ChainConflict(f"group {group} already has chain {list(gs.chain)}")
            gs.chain = chain
        return {"status": "ok", "group": group, "chain": list(chain)}

    def register_key(self, data: dict) -> dict:
        node = _int(data, "node")
        key = data.get("key")
        if not isinstance(key, str) or not key:
            raise BadRequest("missing public key")
        with self._lock:
            if node in self.keys and self.keys[node] != key:
                log.info("node %s replaced its public key", node)
            self.keys[node] = key
            self._notify(("key", node))
        return {"status": "ok"}

    def get_key(self, data: dict) -> dict:
        node = _int(data, "node")
        with self._lock:
            try:
                return {"node": node, "key": self.keys[node]}
            except KeyError:
                raise UnknownNode(f"no key registered for node {node}") from None

    def post_keys(self, data: dict) -> dict:
        node = _int(data, "node")
        keys = data.get("keys")
        if not isinstance(keys, dict):
            raise BadRequest("keys must map peer id to wrapped key")
        with self._lock:
            for peer, sealed in keys.items():
                self.preneg[(node, int(peer))] = sealed
                self._notify(("preneg", int(peer)))
        return {"status": "ok", "count": len(keys)}

    def get_keys(self, data: dict) -> dict:
        node = _int(data, "node")
        from_node = _int(data, "from_node")

        def fetch():
            sealed = self.preneg.get((from_node, node))
            if sealed is None:
                return EMPTY
            return {"status": "ok", "from_node": from_node, "key": sealed}

        return self._poll(("preneg", node), fetch, data)

    # chain protocol --------------------------------------------------------------

    def post_aggregate(self, data: dict) -> dict:
        from_node = _int(data, "from_node")
        to_node = _int(data, "to_node")
        group = _group(data)
        if "aggregate" not in data:
            raise BadRequest("missing aggregate")
        if from_node == to_node:
            raise SelfSend(f"node {from_node} cannot post to itself")
        with self._lock:
            gs = self._group_state(group)
            gs.require_member(from_node)
            gs.require_member(to_node)
            if from_node in gs.excluded:
                log.warning("dropping post from excluded node %s in group %s", from_node, group)
                raise StaleEpoch(f"node {from_node} was excluded after an initiator failover")
            rec = gs.record
            if rec is None or (rec.initiator == from_node and rec.status != PENDING):
                self._begin_attempt(gs, from_node, clear=False)
            if to_node in gs.mailbox:
                log.warning(
                    "group %s: post %s->%s overwrites unconsumed aggregate from %s",
                    group, from_node, to_node, gs.mailbox[to_node].from_node,
                )
            gs.mailbox[to_node] = MailboxEntry(data["aggregate"], from_node, self.clock.now())
            gs.posted += 1
            # a fresh post supersedes whatever the sender was told before
            gs.repost_status.pop(from_node, None)
            self._notify(("agg", group, to_node))
        self._emit("post_aggregate", {"group": group, "from": from_node, "to": to_node})
        return {"status": "ok"}

    def check_aggregate(self, data: dict) -> dict:
        node = _int(data, "node")
        group = _group(data)

        def check():
            gs = self.groups.get(group)
            if gs is None:
                return EMPTY
            status = gs.repost_status.pop(node, None)
            if not status or status.get("status") == "empty":
                return EMPTY
            return dict(status)

        return self._poll(("check", group, node), check, data)

    def get_aggregate(self, data: dict) -> dict:
        node = _int(data, "node")
        group = _group(data)

        def take():
            gs = self.groups.get(group)
            if gs is None or node not in gs.mailbox:
                return EMPTY
            entry = gs.mailbox.pop(node)
            gs.repost_status[entry.from_node] = {"status": "consumed"}
            self._notify(("check", group, entry.from_node))
            return {
                "status": "ok",
                "aggregate": entry.aggregate,
                "from_node": entry.from_node,
                "posted": gs.posted - gs.skipped,
            }

        result = self._poll(("agg", group, node), take, data)
        if result.get("status") == "ok":
            self._emit("get_aggregate", {"group": group, "node": node, "from": result["from_node"]})
        return result

    def post_average(self, data: dict) -> dict:
        node = _int(data, "node")
        group = _group(data)
        status = data.get("status", POSTED)
        if status not in (POSTED, ABORTED):
            raise BadRequest(f"bad average status {status!r}")
        average = data.get("average")
        if status == POSTED and not isinstance(average, list):
            raise BadRequest("average must be a list of numbers")
        with self._lock:
            gs = self._group_state(group)
            rec = gs.record
            if rec is None or rec.initiator != node:
                raise NotInitiator(f"node {node} is not the initiator of group {group}")
            if rec.status != PENDING:
                raise StaleEpoch(f"group {group} already has a result for this round")
            rec.status = status
            rec.average = [float(x) for x in average] if status == POSTED else None
            rec.contributors = gs.posted - gs.skipped
            gs.repost_status[node] = {"status": "consumed"}
            self._notify(("avg",))
        self._emit("post_average", {"group": group, "node": node, "status": status})
        return {"status": "ok"}

    def _global_average(self) -> dict:
        groups = [gs for gs in self.groups.values() if gs.chain is not None or gs.record is not None]
        if not groups:
            return EMPTY
        records = [gs.record for gs in groups]
        if any(r is None or r.status == PENDING for r in records):
            return EMPTY
        if any(r.status == ABORTED for r in records):
            return {"status": ABORTED}
        contributors = sum(r.contributors for r in records)
        if len(records) == 1:
            return {"status": "ok", "average": list(records[0].average), "contributors": contributors}
        stacked = np.array([r.average for r in records], dtype=np.float64)
        if self.weighted_groups:
            weights = np.array([r.contributors for r in records], dtype=np.float64)
            avg = (stacked * weights[:, None]).sum(axis=0) / weights.sum()
        else:
            avg = stacked.mean(axis=0)
        return {"status": "ok", "average": avg.tolist(), "contributors": contributors}

    def get_average(self, data: dict) -> dict:
        return self._poll(("avg",), self._global_average, data)

    def should_initiate(self, data: dict) -> dict:
        node = _int(data, "node")
        group = _group(data)
        with self._lock:
            gs = self._group_state(group)
            gs.require_member(node)
            rec = gs.record
            now = self.clock.now()
            # a finished round is never re-run; rounds are separated by ``reset``
            granted = rec is None or (
                rec.status == PENDING and (now - rec.time) > self.config.aggregation_timeout
            )
            if granted:
                if (
                    rec is not None
                    and rec.status == PENDING
                    and rec.initiator != node
                    and self.exclude_failed_initiator
                ):
                    gs.excluded.add(rec.initiator)
                self._begin_attempt(gs, node, clear=True)
            reply = {
                "init": granted,
                "initiator": gs.record.initiator,
                "excluded": sorted(gs.excluded),
                "status": gs.record.status,
            }
        if granted:
            self._emit("elected", {"group": group, "node": node})
        return reply

    # progress monitor ------------------------------------------------------------

    def direct_repost(self, data: dict) -> dict:
        group = _group(data)
        sender = _int(data, "node")
        target = _int(data, "to_node")
        failed = _int(data, "failed_node") if "failed_node" in data else None
        if sender == target:
            raise SelfSend("repost target equals the stuck sender")
        with self._lock:
            gs = self._group_state(group)
            gs.require_member(sender)
            gs.require_member(target)
            if failed is not None:
                entry = gs.mailbox.get(failed)
                # the stall may have resolved, or another monitor got here first
                if failed in gs.skipped_nodes or entry is None or entry.from_node != sender:
                    return {"status": "ignored"}
                del gs.mailbox[failed]
                gs.skipped_nodes.add(failed)
                gs.skipped += 1
            gs.repost_status[sender] = {"status": "repost", "to_node": target}
            self._notify(("check", group, sender))
        self._emit("direct_repost", {"group": group, "node": sender, "to": target, "failed": failed})
        return {"status": "ok"}

    def mark_skipped(self, data: dict) -> dict:
        group = _group(data)
        node = _int(data, "node")
        with self._lock:
            gs = self._group_state(group)
            gs.require_member(node)
            if node not in gs.skipped_nodes:
                gs.skipped_nodes.add(node)
                gs.skipped += 1
                entry = gs.mailbox.get(node)
                if entry is not None:
                    del gs.mailbox[node]
            skipped = gs.skipped
        return {"status": "ok", "skipped": skipped}

    def _group_view(self, group: int, gs: GroupState) -> dict:
        now = self.clock.now()
        rec = gs.record
        return {
            "group": group,
            "chain": list(gs.chain) if gs.chain is not None else None,
            "entries": [
                {"to": to, "from": e.from_node, "age": now - e.time}
                for to, e in sorted(gs.mailbox.items())
            ],
            "skipped": sorted(gs.skipped_nodes),
            "excluded": sorted(gs.excluded),
            "initiator": rec.initiator if rec else None,
            "status": rec.status if rec else None,
            "attempt": gs.attempt,
        }

    def monitor_state(self, data: dict) -> dict:
        with self._lock:
            if "group" in data:
                group = _group(data)
                gs = self.groups.get(group)
                if gs is None:
                    raise UnknownNode(f"unknown group {group}")
                return self._group_view(group, gs)
            return {"groups": [self._group_view(g, gs) for g, gs in sorted(self.groups.items())]}

    # centralized plaintext baseline ------------------------------------------------

    def insec_post(self, data: dict) -> dict:
        node = _int(data, "node")
        values = data.get("values")
        if not isinstance(values, list):
            raise BadRequest("values must be a list of numbers")
        with self._lock:
            self.insec_values[node] = [float(v) for v in values]
            self._notify(("insec",))
        return {"status": "ok"}

    def insec_average(self, data: dict) -> dict:
        def average():
            expected = sum(len(gs.chain) for gs in self.groups.values() if gs.chain)
            if "expected" in data:
                expected = _int(data, "expected")
            if expected == 0 or len(self.insec_values) < expected:
                return EMPTY
            return {
                "status": "ok",
                "average": np.mean(list(self.insec_values.values()), axis=0).tolist(),
            }

        return self._poll(("insec",), average, data)

    # admin -------------------------------------------------------------------------

    def reset(self, data: dict | None = None) -> dict:
        with self._lock:
            chains = {g: gs.chain for g, gs in self.groups.items()}
            keys = dict(self.keys)
            preneg = dict(self.preneg)
            self._clear_state()
            if (data or {}).get("keep_config", True):
                for g, chain in chains.items():
                    if chain is not None:
                        self.groups[g] = GroupState(chain=chain)
                self.keys = keys
                self.preneg = preneg
        self.reset_stats()
        return {"status": "ok"}

    def stats(self, data: dict | None = None) -> dict:
        with self._stats_lock:
            return {
                "calls": dict(self.calls),
                "continuations": dict(self.continuations),
            }
