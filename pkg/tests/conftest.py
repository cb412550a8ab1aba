import threading

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from safeagg.controller import Controller, ControllerClient, LoopbackTransport, PollConfig
from safeagg.errors import LearnerCrashed
from safeagg.learner import ChainConfig, Learner, make_submission
from safeagg.monitor import MonitorConfig, ProgressMonitor
from safeagg.ring import _backend, codec

# the backend fixture only swaps a module attribute, so sharing it across examples is fine
settings.register_profile("safeagg", suppress_health_check=[HealthCheck.function_scoped_fixture], deadline=None)
settings.load_profile("safeagg")

FAST = PollConfig(poll_time=0.5, yield_time=0.02, aggregation_timeout=2.0)
FAST_MONITOR = MonitorConfig(probe_interval=0.03, progress_timeout=0.25)

_BACKENDS = ["python"] + (["cython"] if _backend.compiled() is not None else [])


@pytest.fixture(params=_BACKENDS)
def backend(request, monkeypatch):
    """Run the test once per available kernel implementation."""
    module = _backend.fallback if request.param == "python" else _backend.compiled()
    monkeypatch.setattr(codec, "kernels", module)
    return module


@pytest.fixture(scope="session")
def keypairs():
    from safeagg.bench import key_pool

    return key_pool(12)


def representable(rng, n, features, bound=1000, scale=1 << 16):
    """Values exactly representable at ``scale``, so the protocol mean is exact."""
    return {k: rng.integers(-bound * scale, bound * scale + 1, size=features) / scale for k in range(1, n + 1)}


class Round:
    """A loopback controller plus one learner per node, run on threads."""

    def __init__(self, n, features=1, *, mode="safe", key_mode="hybrid", values=None, weights=None,
                 failures=None, timeouts=FAST, keypairs=None, controller=None, chain=None, group=1, groups=1):
        self.controller = controller or Controller(timeouts)
        self.chain = tuple(chain or range(1, n + 1))
        self.values = values or {k: np.full(features, float(k)) for k in self.chain}
        self.weights = weights or {}
        failures = failures or {}
        self.client = ControllerClient(LoopbackTransport(self.controller))
        self.client.configure_group(group, self.chain)
        self.learners = {}
        for i, k in enumerate(self.chain):
            cfg = ChainConfig(node=k, chain=self.chain, features=features, mode=mode, key_mode=key_mode,
                              timeouts=timeouts, group=group, groups=groups, weighted=bool(self.weights))
            kp = keypairs[i % len(keypairs)] if keypairs and mode == "safe" else None
            self.learners[k] = Learner(cfg, ControllerClient(LoopbackTransport(self.controller)),
                                       make_submission(self.values[k], self.weights.get(k)),
                                       keypair=kp, fail_at=failures.get(k))
        self.outcomes = {}
        self.errors = {}

    def setup(self):
        for learner in self.learners.values():
            learner.register()
        threads = [threading.Thread(target=l.exchange) for l in self.learners.values()]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        self.controller.reset_stats()
        return self

    def run(self, monitor: MonitorConfig | None = FAST_MONITOR):
        mon = None
        if monitor is not None:
            mon = ProgressMonitor(ControllerClient(LoopbackTransport(self.controller)), monitor).start()

        def body(node, learner):
            try:
                self.outcomes[node] = learner.run()
            except LearnerCrashed:
                pass
            except Exception as exc:  # noqa: BLE001
                self.errors[node] = exc

        threads = [threading.Thread(target=body, args=item) for item in self.learners.items()]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if mon is not None:
            mon.stop()
        self.monitor = mon
        return self

    @property
    def messages(self):
        return self.controller.message_count()


@pytest.fixture
def make_round(keypairs):
    def factory(n, **kw):
        kw.setdefault("keypairs", keypairs)
        return Round(n, **kw)

    return factory


def record_posts(controller):
    """Capture every post_aggregate request the controller receives, in arrival order."""
    seen = []
    inner = controller.dispatch

    def dispatch(endpoint, data=None):
        if endpoint == "post_aggregate":
            seen.append(dict(data))
        return inner(endpoint, data)

    controller.dispatch = dispatch
    return seen


# acceptance criteria: one PASS/FAIL line per criterion, after the run

_criteria: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    number, title = marker.args
    entry = _criteria.setdefault(number, {"title": title, "failed": [], "ran": 0})
    if report.when == "call":
        entry["ran"] += 1
    if report.failed:
        entry["failed"].append(item.name)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        verdict = "FAIL" if entry["failed"] else "PASS"
        line = f"{verdict} criterion {number}: {entry['title']}"
        if entry["failed"]:
            line += f"  (failing: {', '.join(entry['failed'])})"
        terminalreporter.write_line(line)
