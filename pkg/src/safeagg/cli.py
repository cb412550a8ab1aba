"""Command line entry points: controller, learner, monitor and bench."""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading

import numpy as np

from . import crypto
from .bench import DEFAULT_K, Experiment, emit_report, format_summary, run_experiment
from .controller import Controller, ControllerClient, ControllerServer, HttpTransport, PollConfig
from .errors import SafeAggError
from .learner import FAIL_STEPS, ChainConfig, Learner, make_submission
from .monitor import MonitorConfig, ProgressMonitor
from .ring import DEFAULT_SCALE

log = logging.getLogger("safeagg")


def node_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated node ids, got {text!r}") from None


def seeded_values(seed: int, features: int, value_range: int = 1000, scale: int = DEFAULT_SCALE) -> np.ndarray:
    """Deterministic test vector for a learner, exactly representable at ``scale``."""
    rng = np.random.default_rng(seed)
    bound = value_range * scale
    return rng.integers(-bound, bound + 1, size=features) / scale


def _poll_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--poll-time", type=float, default=30.0)
    p.add_argument("--yield-time", type=float, default=0.1)
    p.add_argument("--aggregation-timeout", type=float, default=60.0)


def _poll_config(args) -> PollConfig:
    return PollConfig(args.poll_time, args.yield_time, args.aggregation_timeout)


def cmd_controller(args) -> int:
    controller = Controller(
        _poll_config(args),
        weighted_groups=args.weighted_groups,
        exclude_failed_initiator=not args.traverse_again,
        journal=args.journal,
    )
    server = ControllerServer(controller, args.host, args.port)
    print(json.dumps({"url": server.url}), flush=True)
    signal.signal(signal.SIGTERM, lambda *_: threading.Thread(target=server.stop).start())
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    return 0


def cmd_learner(args) -> int:
    cfg = ChainConfig(
        node=args.node,
        chain=tuple(args.chain),
        features=args.features,
        group=args.group,
        mode=args.mode,
        key_mode=args.key_mode,
        timeouts=_poll_config(args),
        groups=args.groups,
        weighted=args.weight is not None,
        max_attempts=args.max_attempts,
    )
    sub = make_submission(seeded_values(args.value_seed, args.features), args.weight)
    client = ControllerClient(HttpTransport(args.controller))
    client.configure_group(cfg.group, cfg.chain)
    learner = Learner(cfg, client, sub, fail_at=args.fail_at)
    learner.setup(timeout=args.setup_timeout)
    outcome = learner.run()
    print(outcome.to_json(), flush=True)
    return 0


def cmd_monitor(args) -> int:
    client = ControllerClient(HttpTransport(args.controller))
    monitor = ProgressMonitor(client, MonitorConfig(args.probe_interval, args.progress_timeout), args.group or None)
    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    if args.duration:
        threading.Timer(args.duration, stop.set).start()
    try:
        monitor.run(stop)
    except KeyboardInterrupt:
        pass
    for r in monitor.remediated:
        print(json.dumps({"group": r.group, "sender": r.sender, "failed": r.failed, "new_target": r.new_target}))
    return 0


def cmd_bench(args) -> int:
    failures = {n: args.fail_step for n in args.fail}
    if args.fail_initiator:
        failures[1] = "after_post"
    timeouts = PollConfig(args.poll_time, args.yield_time, args.aggregation_timeout)
    e = Experiment(
        protocol=args.protocol,
        nodes=args.nodes,
        features=args.features,
        groups=args.groups,
        repeats=args.repeats,
        failures=failures,
        key_mode=args.key_mode,
        seed=args.seed,
        transport=args.transport,
        delay=args.delay,
        timeouts=timeouts,
        monitor=MonitorConfig(args.probe_interval, args.progress_timeout),
        exclude_failed_initiator=not args.traverse_again,
    )
    stats = run_experiment(e)
    _, summary = emit_report([stats], args.out, k=args.k)
    print(format_summary(summary))
    return 0 if stats.all_correct else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="safeagg", description="Chain-based secure aggregation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("controller", help="serve the controller over HTTP")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--weighted-groups", action="store_true", help="weight group means by contributor count")
    p.add_argument("--traverse-again", action="store_true", help="keep a failed initiator in the retry chain")
    p.add_argument("--journal", help="append state transitions as JSON lines to this file")
    _poll_args(p)
    p.set_defaults(func=cmd_controller)

    p = sub.add_parser("learner", help="take part in one aggregation round")
    p.add_argument("--node", type=int, required=True)
    p.add_argument("--group", type=int, default=1)
    p.add_argument("--groups", type=int, default=1, help="number of groups in the round")
    p.add_argument("--chain", type=node_list, required=True)
    p.add_argument("--features", type=int, required=True)
    p.add_argument("--mode", choices=("safe", "saf"), default="safe")
    p.add_argument("--key-mode", choices=(crypto.HYBRID, crypto.PRENEG), default=crypto.HYBRID)
    p.add_argument("--controller", required=True)
    p.add_argument("--value-seed", type=int, required=True)
    p.add_argument("--weight", type=float)
    p.add_argument("--fail-at", choices=FAIL_STEPS)
    p.add_argument("--max-attempts", type=int, default=3)
    p.add_argument("--setup-timeout", type=float, default=30.0)
    _poll_args(p)
    p.set_defaults(func=cmd_learner)

    p = sub.add_parser("monitor", help="watch for stalled hops and route around them")
    p.add_argument("--controller", required=True)
    p.add_argument("--probe-interval", type=float, default=1.0)
    p.add_argument("--progress-timeout", type=float, default=5.0)
    p.add_argument("--group", type=int, action="append")
    p.add_argument("--duration", type=float, help="stop after this many seconds")
    p.set_defaults(func=cmd_monitor)

    p = sub.add_parser("bench", help="run an experiment and write a CSV")
    p.add_argument("--protocol", choices=("safe", "saf", "insec"), default="safe")
    p.add_argument("--nodes", type=int, required=True)
    p.add_argument("--features", type=int, default=1)
    p.add_argument("--groups", type=int, default=1)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--fail", type=node_list, default=[])
    p.add_argument("--fail-step", choices=FAIL_STEPS, default="start")
    p.add_argument("--fail-initiator", action="store_true")
    p.add_argument("--traverse-again", action="store_true")
    p.add_argument("--transport", choices=("loopback", "http"), default="loopback")
    p.add_argument("--key-mode", choices=(crypto.HYBRID, crypto.PRENEG), default=crypto.HYBRID)
    p.add_argument("--delay", type=float, default=0.0, help="seconds slept before every request")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--probe-interval", type=float, default=0.05)
    p.add_argument("--progress-timeout", type=float, default=0.5)
    p.add_argument("--poll-time", type=float, default=2.0)
    p.add_argument("--yield-time", type=float, default=0.05)
    p.add_argument("--aggregation-timeout", type=float, default=10.0)
    p.add_argument("--k", type=float, default=DEFAULT_K, help="width of the summary band in standard deviations")
    p.add_argument("--out", default="results.csv")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (SafeAggError, ValueError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
