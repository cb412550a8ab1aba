"""Progress monitor: finds chain hops that stopped moving and routes around them.

A stall is an aggregate that has sat unconsumed in some node's mailbox for
longer than ``progress_timeout``. The fix is to tell the sender to re-post its
cached aggregate to the next live node and to stop counting the dead node's
contribution. Stalls in front of the current initiator are left alone; those
are handled by initiator failover.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass

from .controller.transport import ControllerClient
from .errors import ControllerError, ControllerUnreachable

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MonitorConfig:
    probe_interval: float = 1.0
    progress_timeout: float = 5.0
    aggregation_timeout: float | None = None

    def __post_init__(self):
        if not 0 < self.probe_interval < self.progress_timeout:
            raise ValueError("need 0 < probe_interval < progress_timeout")
        if self.aggregation_timeout is not None and not self.progress_timeout < self.aggregation_timeout:
            raise ValueError("progress_timeout must be shorter than aggregation_timeout")


@dataclass(frozen=True)
class StallReport:
    group: int
    sender: int
    failed: int
    new_target: int
    age: float


def next_live(chain, failed: int, dead) -> int | None:
    """First node after ``failed`` in cyclic chain order that is not in ``dead``."""
    chain = list(chain)
    start = chain.index(failed)
    for step in range(1, len(chain)):
        node = chain[(start + step) % len(chain)]
        if node != failed and node not in dead:
            return node
    return None


def find_stalls(view: dict, progress_timeout: float) -> list[StallReport]:
    """Stalls visible in one group's ``monitor_state`` reply."""
    chain = view.get("chain")
    if not chain or view.get("status") != "pending":
        return []
    dead = set(view.get("skipped", ())) | set(view.get("excluded", ()))
    reports = []
    for entry in view.get("entries", ()):
        failed, sender, age = entry["to"], entry["from"], entry["age"]
        if age <= progress_timeout or failed == view.get("initiator"):
            continue
        target = next_live(chain, failed, dead)
        if target is None or target == sender:
            continue
        reports.append(StallReport(view["group"], sender, failed, target, age))
    return reports


class ProgressMonitor:
    def __init__(self, client: ControllerClient, config: MonitorConfig = MonitorConfig(), groups=None):
        self.client = client
        self.config = config
        self.groups = list(groups) if groups is not None else None
        self.remediated: list[StallReport] = []
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def probe(self, group: int) -> list[StallReport]:
        return find_stalls(self.client.monitor_state(group), self.config.progress_timeout)

    def remediate(self, report: StallReport) -> bool:
        reply = self.client.direct_repost(report.group, report.sender, report.new_target, report.failed)
        if reply.get("status") != "ok":
            return False
        self.client.mark_skipped(report.group, report.failed)
        log.info(
            "group %s: node %s stalled for %.2fs, %s now posts to %s",
            report.group, report.failed, report.age, report.sender, report.new_target,
        )
        self.remediated.append(report)
        return True

    def _groups(self) -> list[int]:
        if self.groups is not None:
            return self.groups
        return [view["group"] for view in self.client.monitor_state()["groups"]]

    def sweep(self) -> int:
        fixed = 0
        for group in self._groups():
            for report in self.probe(group):
                fixed += self.remediate(report)
        return fixed

    def run(self, stop: threading.Event | None = None) -> None:
        stop = stop or self._stop
        while not stop.is_set():
            try:
                self.sweep()
            except ControllerUnreachable as exc:
                log.warning("monitor cannot reach controller: %s", exc)
            except ControllerError as exc:
                log.warning("monitor probe failed: %s", exc)
            stop.wait(self.config.probe_interval)

    def start(self) -> "ProgressMonitor":
        self._stop.clear()
        self._thread = threading.Thread(target=self.run, name="progress-monitor", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5)
