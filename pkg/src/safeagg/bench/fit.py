"""Timeout fitting, failover overhead and the closed-form message models."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np

from ..errors import InsufficientSamples
from ..monitor import MonitorConfig
from .harness import Experiment, run_experiment

DEFAULT_MARGIN = 4.0


@dataclass(frozen=True)
class TimeoutPredictor:
    """Degree-2 polynomial in n per feature count, plus a fixed safety margin."""

    coefficients: dict[int, tuple[float, float, float]]
    margin: float = DEFAULT_MARGIN

    def __call__(self, n: float, features: int | None = None) -> float:
        if features is None:
            if len(self.coefficients) != 1:
                raise ValueError("predictor was trained on several feature counts; pass one")
            (coeffs,) = self.coefficients.values()
        else:
            try:
                coeffs = self.coefficients[features]
            except KeyError:
                raise ValueError(f"no timings were fitted for F={features}") from None
        return float(np.polyval(coeffs, n)) + self.margin


def fit_timeout(samples: Iterable[tuple[int, int, float]], margin: float = DEFAULT_MARGIN) -> TimeoutPredictor:
    """Least-squares fit of clean-run times ``(n, F, seconds)``."""
    by_features: dict[int, list[tuple[int, float]]] = defaultdict(list)
    for n, features, seconds in samples:
        by_features[int(features)].append((int(n), float(seconds)))
    if not by_features:
        raise InsufficientSamples("no timing samples")
    coefficients = {}
    for features, points in by_features.items():
        ns = np.array([p[0] for p in points], dtype=np.float64)
        ts = np.array([p[1] for p in points], dtype=np.float64)
        if len(np.unique(ns)) < 3:
            raise InsufficientSamples(f"F={features}: need at least 3 distinct node counts")
        coefficients[features] = tuple(float(c) for c in np.polyfit(ns, ts, 2))
    return TimeoutPredictor(coefficients, margin)


def linear_r2(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    residual = y - (slope * x + intercept)
    total = ((y - y.mean()) ** 2).sum()
    if total == 0:
        return 1.0
    return float(1 - (residual**2).sum() / total)


# message models

def chain_messages(n: int, f: int = 0, i: int = 0, g: int = 0) -> int:
    """Closed-form count for n learners, f skipped relays, i initiator restarts, g groups.

    ``g`` is only charged when there is more than one group.
    """
    return (i + 1) * (4 * n + 2 * f + i * n + (g if g > 1 else 0))


def insec_messages(n: int) -> int:
    return 2 * n


def bon_messages(n: int) -> int:
    """Quadratic count model for pairwise-masking aggregation. A model, not a measurement."""
    return n * n


# failover overhead

@dataclass(frozen=True)
class OverheadPoint:
    n: int
    f: int
    clean_time: float
    failed_time: float
    allowance: float

    @property
    def overhead(self) -> float:
        return (self.failed_time - self.allowance) - self.clean_time


def failover_overhead(e: Experiment, budget: float = 2.0) -> list[OverheadPoint]:
    """Pair a failed run of n nodes against a clean run of the n-f that finish.

    The total stall allowance ``budget`` is split evenly over the failures so
    that configurations with different f are charged the same total timeout.
    """
    f = len(e.failures)
    clean = run_experiment(replace(e, nodes=e.nodes - f, failures={}))
    if f == 0:
        failed, allowance = run_experiment(e), 0.0
    else:
        per_failure = budget / f
        probe = min(e.monitor.probe_interval if e.monitor else 0.05, per_failure / 2)
        failed = run_experiment(replace(e, monitor=MonitorConfig(probe, per_failure)))
        allowance = budget
    return [
        OverheadPoint(e.nodes, f, c.wall_time, x.wall_time, allowance)
        for c, x in zip(clean.records, failed.records)
    ]
