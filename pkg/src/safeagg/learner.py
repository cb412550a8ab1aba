"""Learner side of the chain protocol.

A learner either starts the round (initiator: mask, post, wait for the chain
to come back, unmask, publish the mean) or relays it (non-initiator: fetch,
add its own vector, post to its successor, wait for the mean). All traffic
goes through the controller; only the cipher decides whether the controller
can read it.
"""

from __future__ import annotations

import base64
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import crypto
from .controller.core import PollConfig
from .controller.transport import ControllerClient
from .errors import (
    CryptoError,
    LearnerCrashed,
    MaxAttemptsExceeded,
    MissingKeys,
    NonPositiveWeight,
    RoundTimeout,
    TooFewContributors,
    UnknownNode,
)
from .ring import DEFAULT_SCALE, FixedPointCodec, RingVector, encode, finalize_average, fresh_mask

log = logging.getLogger(__name__)

SAF = "saf"
SAFE = "safe"
MODES = (SAF, SAFE)
KEY_MODES = (crypto.HYBRID, crypto.PRENEG)

INITIATOR = "initiator"
NON_INITIATOR = "non-initiator"
EXCLUDED = "excluded"
WAITING = "waiting"

# points at which the harness can make a learner die
FAIL_STEPS = ("start", "after_get", "after_post")


@dataclass(frozen=True)
class ChainConfig:
    node: int
    chain: tuple[int, ...]
    features: int
    group: int = 1
    initiator: int | None = None
    scale: int = DEFAULT_SCALE
    mode: str = SAFE
    key_mode: str = crypto.HYBRID
    timeouts: PollConfig = field(default_factory=PollConfig)
    groups: int = 1
    weighted: bool = False
    max_attempts: int = 3

    def __post_init__(self):
        object.__setattr__(self, "chain", tuple(int(n) for n in self.chain))
        if len(self.chain) < 3:
            raise ValueError("a chain needs at least 3 learners")
        if len(set(self.chain)) != len(self.chain):
            raise ValueError("chain contains duplicate node ids")
        if self.node not in self.chain:
            raise ValueError(f"node {self.node} is not in the chain")
        if self.initiator is None:
            object.__setattr__(self, "initiator", self.chain[0])
        elif self.initiator not in self.chain:
            raise ValueError("initiator must be a chain member")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.key_mode not in KEY_MODES:
            raise ValueError(f"key_mode must be one of {KEY_MODES}")
        if self.features < 1:
            raise ValueError("need at least one feature")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be positive")

    @property
    def role(self) -> str:
        return INITIATOR if self.node == self.initiator else NON_INITIATOR

    @property
    def codec(self) -> FixedPointCodec:
        return FixedPointCodec(self.scale)

    def successor(self, node: int | None = None, excluded=()) -> int:
        """Next chain member after ``node``, cyclically, skipping ``excluded``."""
        node = self.node if node is None else node
        live = [n for n in self.chain if n not in excluded or n == node]
        return live[(live.index(node) + 1) % len(live)]


@dataclass(frozen=True)
class Submission:
    values: np.ndarray
    weight: float | None = None

    def wire_values(self) -> np.ndarray:
        """What actually travels the chain: values*weight then the weight itself."""
        if self.weight is None:
            return self.values
        return np.concatenate([self.values * self.weight, [self.weight]])


def make_submission(values, weight: float | None = None) -> Submission:
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if weight is not None:
        if not weight > 0:
            raise NonPositiveWeight(f"weight must be positive, got {weight!r}")
        weight = float(weight)
    return Submission(arr, weight)


def resolve_weighted(avg_vector, contributors: int | None = None, scale: int | None = None) -> np.ndarray:
    """Turn the mean of weighted submissions back into the sample-weighted mean.

    Given the contributor count and codec scale of a single-group round, the
    exact integer ring totals are rebuilt first, so the result is one
    correctly rounded division instead of a ratio of two rounded means.
    """
    avg = np.asarray(avg_vector, dtype=np.float64)
    if avg.shape[0] < 2:
        raise ValueError("weighted average needs at least one feature plus the weight")
    if contributors is not None and scale is not None:
        totals = np.rint(avg * (contributors * scale))
        if np.all(np.abs(totals) < 2.0**53):
            return totals[:-1] / totals[-1]
    return avg[:-1] / avg[-1]


@dataclass
class RoundOutcome:
    node: int
    group: int
    role: str
    average: list[float]
    contributors: int
    attempts: int = 1
    reposts: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self))


# ciphers -----------------------------------------------------------------------


class PlainCipher:
    """SAF: ring vectors travel as decimal text, readable by the controller."""

    name = SAF

    def seal(self, vec: RingVector, to: int) -> str:
        return vec.to_text()

    def open(self, wire: str, from_node: int) -> RingVector:
        return RingVector.from_text(wire)


class HybridCipher:
    name = crypto.HYBRID

    def __init__(self, keypair: crypto.KeyPair, public_key: Callable[[int], object]):
        self.keypair = keypair
        self.public_key = public_key

    def seal(self, vec: RingVector, to: int) -> str:
        return crypto.seal(vec.to_bytes(), self.public_key(to)).to_wire()

    def open(self, wire: str, from_node: int) -> RingVector:
        env = crypto.Envelope.from_wire(wire)
        return RingVector.from_bytes(crypto.open_envelope(env, self.keypair.private))


class PrenegCipher:
    name = crypto.PRENEG

    def __init__(self, table: crypto.PrenegKeyTable, ensure_key: Callable[[int], None]):
        self.table = table
        self.ensure_key = ensure_key

    def seal(self, vec: RingVector, to: int) -> str:
        if not self.table.has_key_for(to):
            self.ensure_key(to)
        return crypto.seal_preneg(vec.to_bytes(), self.table, to).to_wire()

    def open(self, wire: str, from_node: int) -> RingVector:
        env = crypto.Envelope.from_wire(wire)
        return RingVector.from_bytes(crypto.open_preneg(env, self.table, from_node))


def select_cipher(cfg: ChainConfig, keypair=None, public_key=None, table=None, ensure_key=None):
    if cfg.mode == SAF:
        return PlainCipher()
    if keypair is None:
        raise MissingKeys("SAFE mode needs this learner's key pair")
    if cfg.key_mode == crypto.HYBRID:
        if public_key is None:
            raise MissingKeys("SAFE hybrid mode needs a public key source")
        return HybridCipher(keypair, public_key)
    if table is None:
        raise MissingKeys("pre-negotiated mode needs a completed key negotiation")
    return PrenegCipher(table, ensure_key or (lambda to: None))


# learner -----------------------------------------------------------------------


class Learner:
    def __init__(
        self,
        cfg: ChainConfig,
        client: ControllerClient,
        submission: Submission,
        *,
        keypair: crypto.KeyPair | None = None,
        fail_at: str | None = None,
    ):
        if fail_at is not None and fail_at not in FAIL_STEPS:
            raise ValueError(f"fail_at must be one of {FAIL_STEPS}")
        wire = submission.wire_values()
        expected = cfg.features + (1 if cfg.weighted else 0)
        if wire.shape[0] != expected:
            raise ValueError(f"submission has {wire.shape[0]} wire features, config expects {expected}")
        if cfg.weighted != (submission.weight is not None):
            raise ValueError("weighted config and submission disagree")
        self.cfg = cfg
        self.client = client
        self.submission = submission
        self.encoded = encode(wire, cfg.codec)
        if cfg.mode == SAFE and keypair is None:
            keypair = crypto.generate_keypair()
        self.keypair = keypair
        self.fail_at = fail_at
        self.reposts = 0
        self._public_keys: dict[int, object] = {}
        self._table: crypto.PrenegKeyTable | None = None
        self._cipher = None

    # key exchange

    def register(self) -> None:
        if self.cfg.mode == SAFE:
            self.client.register_key(self.cfg.node, self.keypair.public_pem())

    def _fetch_public_key(self, node: int, deadline: float | None = None):
        if node not in self._public_keys:
            try:
                if deadline is None:
                    pem = self.client.get_key(node)
                else:
                    pem = self.client.wait_key(node, deadline)
            except UnknownNode as exc:
                raise MissingKeys(f"node {node} has not registered a public key") from exc
            self._public_keys[node] = crypto.public_key_from_pem(pem)
        return self._public_keys[node]

    def _ensure_preneg(self, peer: int, deadline: float | None = None) -> None:
        if deadline is None:
            deadline = time.monotonic() + self.cfg.timeouts.poll_time
        reply = self.client.get_keys(self.cfg.node, peer, deadline)
        if reply.get("status") != "ok":
            raise MissingKeys(f"node {peer} never published a key for node {self.cfg.node}")
        self._table.accept(peer, base64.b64decode(reply["key"]), self.keypair.private)

    def exchange(self, timeout: float | None = None) -> None:
        """Fetch what this learner needs to seal for its successor."""
        cfg = self.cfg
        if cfg.mode == SAF:
            self._cipher = select_cipher(cfg)
            return
        deadline = time.monotonic() + (timeout if timeout is not None else cfg.timeouts.poll_time)
        succ = cfg.successor()
        if cfg.key_mode == crypto.HYBRID:
            self._fetch_public_key(succ, deadline)
            self._cipher = select_cipher(cfg, self.keypair, public_key=self._fetch_public_key)
            return
        peers = {n: self._fetch_public_key(n, deadline) for n in cfg.chain}
        self._table, entries = crypto.preneg_publish(cfg.node, peers)
        self.client.post_keys(cfg.node, {p: base64.b64encode(k).decode("ascii") for p, k in entries})
        self._ensure_preneg(succ, deadline)
        self._cipher = select_cipher(cfg, self.keypair, table=self._table, ensure_key=self._ensure_preneg)

    def setup(self, timeout: float | None = None) -> None:
        self.register()
        self.exchange(timeout)

    @property
    def cipher(self):
        if self._cipher is None:
            raise MissingKeys("key exchange has not run")
        return self._cipher

    # protocol steps

    def _crash_point(self, step: str) -> None:
        if self.fail_at == step:
            log.info("node %s: injected crash at %s", self.cfg.node, step)
            raise LearnerCrashed(f"node {self.cfg.node} crashed at {step}")

    def _post(self, to: int, raw: RingVector) -> None:
        self.client.post_aggregate(self.cfg.node, to, self.cipher.seal(raw, to), self.cfg.group)

    def _await_consumption(self, raw: RingVector, deadline: float) -> bool:
        """Wait until the successor took our post, re-sealing on repost directives.

        The cached plaintext aggregate is what gets re-sent; it is never
        recomputed. Returns False if the window closed with no news.
        """
        while True:
            reply = self.client.check_aggregate(self.cfg.node, self.cfg.group, deadline)
            status = reply.get("status")
            if status == "consumed":
                return True
            if status == "repost":
                target = int(reply["to_node"])
                log.info("node %s: reposting to %s", self.cfg.node, target)
                self.reposts += 1
                self._post(target, raw)
                continue
            return False

    def _round_deadline(self) -> float:
        t = self.cfg.timeouts
        return time.monotonic() + t.aggregation_timeout + t.poll_time

    def _await_average(self, deadline: float) -> tuple[list[float], int]:
        reply = self.client.get_average(deadline)
        status = reply.get("status")
        if status == "aborted":
            raise TooFewContributors("the initiator aborted the round")
        if status != "ok":
            raise RoundTimeout(f"node {self.cfg.node}: no average before deadline")
        return reply["average"], int(reply.get("contributors", 0))

    def run_initiator(self, excluded=frozenset()) -> tuple[list[float], int]:
        cfg = self.cfg
        t = cfg.timeouts
        started = time.monotonic()
        deadline = started + t.aggregation_timeout
        mask = fresh_mask(len(self.encoded))
        raw = self.encoded + mask.vector
        self._post(cfg.successor(excluded=excluded), raw)
        self._crash_point("after_post")
        self._await_consumption(raw, deadline)
        if time.monotonic() >= deadline:
            raise RoundTimeout(f"initiator {cfg.node}: chain did not progress")
        reply = self.client.get_aggregate(cfg.node, cfg.group, deadline)
        if reply.get("status") != "ok":
            raise RoundTimeout(f"initiator {cfg.node}: final aggregate never arrived")
        total = self.cipher.open(reply["aggregate"], int(reply["from_node"]))
        contributors = int(reply["posted"])
        try:
            avg = finalize_average(total, mask, contributors, cfg.codec)
        except TooFewContributors:
            self.client.post_average([], cfg.node, cfg.group, status="aborted")
            raise
        self.client.post_average(avg.tolist(), cfg.node, cfg.group)
        if cfg.groups > 1:
            global_avg, _ = self._await_average(started + t.aggregation_timeout + t.poll_time)
            return global_avg, contributors
        return avg.tolist(), contributors

    def run_non_initiator(self, excluded=frozenset()) -> tuple[list[float], int]:
        cfg = self.cfg
        deadline = self._round_deadline()
        reply = self.client.get_aggregate(cfg.node, cfg.group, deadline)
        if reply.get("status") != "ok":
            raise RoundTimeout(f"node {cfg.node}: no aggregate arrived")
        self._crash_point("after_get")
        incoming = self.cipher.open(reply["aggregate"], int(reply["from_node"]))
        raw = incoming + self.encoded
        self._post(cfg.successor(excluded=excluded), raw)
        self._crash_point("after_post")
        self._await_consumption(raw, deadline)
        return self._await_average(deadline)

    def failover_driver(self) -> RoundOutcome:
        """Run the round; on timeout ask for the initiator role and retry."""
        cfg = self.cfg
        self._crash_point("start")
        role = cfg.role
        excluded: frozenset[int] = frozenset()
        attempts = 0
        self.reposts = 0
        while True:
            attempts += 1
            try:
                if role == INITIATOR:
                    avg, contributors = self.run_initiator(excluded)
                elif role in (EXCLUDED, WAITING):
                    avg, contributors = self._await_average(self._round_deadline())
                else:
                    avg, contributors = self.run_non_initiator(excluded)
                break
            except RoundTimeout:
                if attempts >= cfg.max_attempts:
                    raise MaxAttemptsExceeded(f"node {cfg.node} gave up after {attempts} attempts") from None
                reply = self.client.should_initiate(cfg.node, cfg.group)
                excluded = frozenset(int(n) for n in reply.get("excluded", ()))
                if reply.get("init"):
                    role = INITIATOR
                elif cfg.node in excluded:
                    role = EXCLUDED
                elif reply.get("status") in ("posted", "aborted"):
                    # our group is done; only the global mean is outstanding
                    role = WAITING
                else:
                    role = NON_INITIATOR
                log.info("node %s: attempt %d as %s", cfg.node, attempts + 1, role)
        average = np.asarray(avg, dtype=np.float64)
        if cfg.weighted:
            # a mean of group means no longer has integer totals behind it
            if cfg.groups == 1:
                average = resolve_weighted(average, contributors, cfg.scale)
            else:
                average = resolve_weighted(average)
        return RoundOutcome(
            node=cfg.node,
            group=cfg.group,
            role=role,
            average=average.tolist(),
            contributors=contributors,
            attempts=attempts,
            reposts=self.reposts,
        )

    run = failover_driver


__all__ = [
    "ChainConfig",
    "CryptoError",
    "HybridCipher",
    "Learner",
    "PlainCipher",
    "PrenegCipher",
    "RoundOutcome",
    "Submission",
    "make_submission",
    "resolve_weighted",
    "select_cipher",
]
