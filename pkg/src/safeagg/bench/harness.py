"""Run whole aggregation rounds with one thread per learner and measure them."""

from __future__ import annotations

import logging
import statistics
import threading
import time
from contextlib import ExitStack
from dataclasses import dataclass, field

import numpy as np

from .. import crypto
from ..controller import (
    INSEC_ENDPOINTS,
    KEY_ENDPOINTS,
    PROTOCOL_ENDPOINTS,
    Controller,
    ControllerClient,
    ControllerServer,
    HttpTransport,
    LoopbackTransport,
    PollConfig,
)
from ..errors import LearnerCrashed, MaxAttemptsExceeded, TooFewContributors
from ..learner import FAIL_STEPS, ChainConfig, Learner, make_submission, resolve_weighted
from ..monitor import MonitorConfig, ProgressMonitor
from ..ring import DEFAULT_SCALE

log = logging.getLogger(__name__)

PROTOCOLS = ("safe", "saf", "insec")
TRANSPORTS = ("loopback", "http")


@dataclass(frozen=True)
class Experiment:
    protocol: str = "safe"
    nodes: int = 5
    features: int = 1
    groups: int = 1
    repeats: int = 1
    failures: dict[int, str] = field(default_factory=dict)
    key_mode: str = crypto.HYBRID
    seed: int = 0
    transport: str = "loopback"
    delay: float = 0.0
    timeouts: PollConfig = field(
        default_factory=lambda: PollConfig(poll_time=2.0, yield_time=0.05, aggregation_timeout=10.0)
    )
    monitor: MonitorConfig | None = field(default_factory=lambda: MonitorConfig(0.05, 0.5))
    weighted: bool = False
    weighted_groups: bool = False
    exclude_failed_initiator: bool = True
    value_range: int = 1000
    scale: int = DEFAULT_SCALE
    max_attempts: int = 3

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}")
        if self.transport not in TRANSPORTS:
            raise ValueError(f"transport must be one of {TRANSPORTS}")
        if self.groups < 1:
            raise ValueError("need at least one group")
        if self.nodes // self.groups < 3:
            raise ValueError("every group needs at least 3 learners")
        if self.repeats < 1:
            raise ValueError("need at least one repeat")
        for node, step in self.failures.items():
            if not 1 <= node <= self.nodes:
                raise ValueError(f"failed node {node} is outside 1..{self.nodes}")
            if step not in FAIL_STEPS:
                raise ValueError(f"unknown failure step {step!r}")

    @property
    def chains(self) -> list[tuple[int, ...]]:
        """Contiguous, near-equal split of node ids 1..n into groups."""
        ids = np.arange(1, self.nodes + 1)
        return [tuple(int(n) for n in part) for part in np.array_split(ids, self.groups)]


@dataclass
class RunRecord:
    protocol: str
    n: int
    F: int
    g: int
    f: int
    repeat: int
    wall_time: float
    messages: int
    correct: bool
    by_endpoint: dict[str, int] = field(default_factory=dict)
    key_messages: int = 0
    asymmetric_ops: int = 0
    phases: dict[str, float] = field(default_factory=dict)
    contributors: int = 0
    attempts: int = 1
    aborted: bool = False
    errors: dict[int, str] = field(default_factory=dict)
    averages: dict[int, list[float]] = field(default_factory=dict)
    expected: list[float] = field(default_factory=list)


@dataclass
class RunStats:
    experiment: Experiment
    records: list[RunRecord] = field(default_factory=list)

    @property
    def wall_times(self) -> list[float]:
        return [r.wall_time for r in self.records]

    @property
    def mean_wall(self) -> float:
        return statistics.fmean(self.wall_times)

    @property
    def std_wall(self) -> float:
        return statistics.stdev(self.wall_times) if len(self.records) > 1 else 0.0

    @property
    def messages(self) -> list[int]:
        return [r.messages for r in self.records]

    @property
    def all_correct(self) -> bool:
        return all(r.correct for r in self.records if not r.aborted)


_pool_lock = threading.Lock()
_key_pool: list[crypto.KeyPair] = []


def key_pool(count: int) -> list[crypto.KeyPair]:
    """Process-wide cache of RSA key pairs; generating them dominates small runs."""
    with _pool_lock:
        while len(_key_pool) < count:
            _key_pool.append(crypto.generate_keypair())
        return _key_pool[:count]


def _values(e: Experiment, repeat: int) -> tuple[dict[int, np.ndarray], dict[int, float]]:
    rng = np.random.default_rng([e.seed, repeat])
    bound = e.value_range * e.scale
    values = {n: rng.integers(-bound, bound + 1, size=e.features) / e.scale for n in range(1, e.nodes + 1)}
    weights = {}
    if e.weighted:
        weights = {n: float(w) for n, w in zip(values, rng.integers(1, 1001, size=e.nodes))}
    return values, weights


def _contributes(node: int, chain: tuple[int, ...], failures: dict[int, str]) -> bool:
    step = failures.get(node)
    # a relay that dies after handing on its aggregate has already contributed
    return step is None or (step == "after_post" and node != chain[0])


def oracle_average(e: Experiment, values, weights) -> np.ndarray:
    group_means = []
    for chain in e.chains:
        members = [n for n in chain if _contributes(n, chain, e.failures)]
        if e.weighted:
            wire = [np.concatenate([values[n] * weights[n], [weights[n]]]) for n in members]
        else:
            wire = [values[n] for n in members]
        group_means.append((np.mean(wire, axis=0), len(members)))
    if e.weighted_groups:
        total = sum(c for _, c in group_means)
        avg = sum(m * c for m, c in group_means) / total
    else:
        avg = np.mean([m for m, _ in group_means], axis=0)
    return resolve_weighted(avg) if e.weighted else avg


def _client_factory(e: Experiment, controller: Controller, stack: ExitStack):
    if e.transport == "loopback":
        return lambda: ControllerClient(LoopbackTransport(controller, e.delay))
    server = stack.enter_context(ControllerServer(controller))
    transports: list[HttpTransport] = []
    stack.callback(lambda: [t.close() for t in transports])

    def make() -> ControllerClient:
        t = HttpTransport(server.url, e.delay)
        transports.append(t)
        return ControllerClient(t)

    return make


def _run_threads(fns: dict[int, callable]) -> tuple[dict, dict[int, BaseException], float]:
    results: dict = {}
    errors: dict[int, BaseException] = {}
    barrier = threading.Barrier(len(fns) + 1)

    def body(node, fn):
        barrier.wait()
        try:
            results[node] = fn()
        except BaseException as exc:  # noqa: BLE001
            errors[node] = exc

    threads = [threading.Thread(target=body, args=item, daemon=True) for item in fns.items()]
    for t in threads:
        t.start()
    barrier.wait()
    start = time.perf_counter()
    for t in threads:
        t.join()
    return results, errors, time.perf_counter() - start


def _insec_repeat(e: Experiment, repeat: int) -> RunRecord:
    values, _ = _values(e, repeat)
    controller = Controller(e.timeouts)
    with ExitStack() as stack:
        client = _client_factory(e, controller, stack)
        deadline_pad = e.timeouts.aggregation_timeout

        def node_fn(node):
            c = client()

            def run():
                c.insec_post(node, values[node].tolist())
                reply = c.insec_average(time.monotonic() + deadline_pad, expected=e.nodes)
                return reply.get("average")

            return run

        fns = {n: node_fn(n) for n in values}
        results, errors, wall = _run_threads(fns)
    expected = np.mean(list(values.values()), axis=0)
    tol = 1e-9 * max(1.0, float(np.abs(expected).max()))
    correct = not errors and all(r is not None and np.allclose(r, expected, rtol=0, atol=tol) for r in results.values())
    return RunRecord(
        protocol="insec", n=e.nodes, F=e.features, g=1, f=0, repeat=repeat, wall_time=wall,
        messages=controller.message_count(INSEC_ENDPOINTS), correct=correct,
        by_endpoint=controller.messages_by_endpoint(), contributors=e.nodes,
        errors={n: repr(x) for n, x in errors.items()},
        averages={n: list(r) for n, r in results.items() if r is not None}, expected=expected.tolist(),
    )


def _chain_repeat(e: Experiment, repeat: int) -> RunRecord:
    values, weights = _values(e, repeat)
    controller = Controller(
        e.timeouts,
        weighted_groups=e.weighted_groups,
        exclude_failed_initiator=e.exclude_failed_initiator,
    )
    keys = key_pool(e.nodes) if e.protocol == "safe" else [None] * e.nodes
    with ExitStack() as stack:
        client = _client_factory(e, controller, stack)
        admin = client()
        learners: dict[int, Learner] = {}
        for group, chain in enumerate(e.chains, start=1):
            admin.configure_group(group, chain)
            for node in chain:
                cfg = ChainConfig(
                    node=node, chain=chain, features=e.features, group=group,
                    scale=e.scale, mode=e.protocol, key_mode=e.key_mode, timeouts=e.timeouts,
                    groups=e.groups, weighted=e.weighted, max_attempts=e.max_attempts,
                )
                sub = make_submission(values[node], weights.get(node))
                learners[node] = Learner(
                    cfg, client(), sub, keypair=keys[node - 1], fail_at=e.failures.get(node)
                )

        t0 = time.perf_counter()
        for learner in learners.values():
            learner.register()
        _, setup_errors, _ = _run_threads({n: l.exchange for n, l in learners.items()})
        if setup_errors:
            raise next(iter(setup_errors.values()))
        setup_time = time.perf_counter() - t0
        key_messages = controller.message_count(KEY_ENDPOINTS)

        controller.reset_stats()
        crypto.stats.reset()
        monitor = None
        if e.monitor is not None:
            monitor = ProgressMonitor(client(), e.monitor, groups=range(1, e.groups + 1)).start()
            stack.callback(monitor.stop)
        results, errors, wall = _run_threads({n: l.run for n, l in learners.items()})
        messages = controller.message_count(PROTOCOL_ENDPOINTS)
        by_endpoint = controller.messages_by_endpoint()
        asym = crypto.stats.asymmetric

    crashed = {n for n, x in errors.items() if isinstance(x, LearnerCrashed)}
    aborted = any(isinstance(x, TooFewContributors) for x in errors.values())
    unexpected = {n: x for n, x in errors.items() if n not in crashed and not isinstance(x, TooFewContributors)}
    for exc in unexpected.values():
        if isinstance(exc, MaxAttemptsExceeded):
            raise exc
    expected = oracle_average(e, values, weights)
    tol = 1.0 / (2 * e.scale * e.nodes)
    correct = (
        not aborted
        and not unexpected
        and bool(results)
        and all(np.allclose(o.average, expected, rtol=0, atol=tol) for o in results.values())
    )
    outcomes = list(results.values())
    return RunRecord(
        protocol=e.protocol, n=e.nodes, F=e.features, g=e.groups, f=len(e.failures), repeat=repeat,
        wall_time=wall, messages=messages, correct=correct, by_endpoint=by_endpoint,
        key_messages=key_messages, asymmetric_ops=asym,
        phases={"setup": setup_time, "round": wall},
        contributors=max((o.contributors for o in outcomes), default=0),
        attempts=max((o.attempts for o in outcomes), default=0),
        aborted=aborted,
        errors={n: repr(x) for n, x in errors.items()},
        averages={n: o.average for n, o in results.items()},
        expected=expected.tolist(),
    )


def run_experiment(e: Experiment) -> RunStats:
    stats = RunStats(e)
    for repeat in range(e.repeats):
        if e.protocol == "insec":
            record = _insec_repeat(e, repeat)
        else:
            record = _chain_repeat(e, repeat)
        log.info(
            "%s n=%d F=%d g=%d repeat %d: %.3fs, %d messages, correct=%s",
            e.protocol, e.nodes, e.features, e.groups, repeat, record.wall_time, record.messages, record.correct,
        )
        stats.records.append(record)
    return stats


def run_insec(n: int, features: int, **kw) -> RunStats:
    return run_experiment(Experiment(protocol="insec", nodes=n, features=features, **kw))
