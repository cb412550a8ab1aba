"""Per-hop confidentiality for chain aggregates.

Two sealing paths share one :class:`Envelope` wire form:

* hybrid: a fresh AES-256-GCM content key per message, wrapped with the
  recipient's RSA-OAEP (SHA-256) public key;
* pre-negotiated: AES-256-GCM under a per-peer key exchanged once per epoch,
  so aggregation hops do no asymmetric work at all.
"""

from __future__ import annotations

import base64
import json
import os
import threading
from dataclasses import dataclass, field
from typing import Mapping

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import padding, rsa
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .errors import DecryptFailure, EncryptFailure, EntropyUnavailable, UnknownPeer

RSA_BITS = 2048
CONTENT_KEY_BYTES = 32
NONCE_BYTES = 12
TAG_BYTES = 16

HYBRID = "hybrid"
PRENEG = "preneg"

_OAEP = padding.OAEP(mgf=padding.MGF1(algorithm=hashes.SHA256()), algorithm=hashes.SHA256(), label=None)


class _OpCounter:
    """Counts RSA operations so tests can prove a path is symmetric-only."""

    def __init__(self):
        self._lock = threading.Lock()
        self.asymmetric = 0

    def bump(self) -> None:
        with self._lock:
            self.asymmetric += 1

    def reset(self) -> None:
        with self._lock:
            self.asymmetric = 0


stats = _OpCounter()


@dataclass(frozen=True)
class KeyPair:
    public: rsa.RSAPublicKey
    private: rsa.RSAPrivateKey = field(repr=False)

    def public_pem(self) -> str:
        return public_key_to_pem(self.public)


def generate_keypair(bits: int = RSA_BITS) -> KeyPair:
    try:
        private = rsa.generate_private_key(public_exponent=65537, key_size=bits)
    except OSError as exc:
        raise EntropyUnavailable(str(exc)) from exc
    return KeyPair(private.public_key(), private)


def public_key_to_pem(pk: rsa.RSAPublicKey) -> str:
    return pk.public_bytes(
        serialization.Encoding.PEM, serialization.PublicFormat.SubjectPublicKeyInfo
    ).decode("ascii")


def public_key_from_pem(pem: str) -> rsa.RSAPublicKey:
    key = serialization.load_pem_public_key(pem.encode("ascii"))
    if not isinstance(key, rsa.RSAPublicKey):
        raise ValueError("expected an RSA public key")
    return key


def _b64(data: bytes | None) -> str | None:
    return None if data is None else base64.b64encode(data).decode("ascii")


def _unb64(text: str | None) -> bytes | None:
    return None if text is None else base64.b64decode(text.encode("ascii"), validate=True)


@dataclass(frozen=True)
class Envelope:
    mode: str
    nonce: bytes
    body: bytes
    tag: bytes
    sealed_key: bytes | None = None

    def to_wire(self) -> str:
        return json.dumps(
            {
                "sealed_key": _b64(self.sealed_key),
                "nonce": _b64(self.nonce),
                "body": _b64(self.body),
                "tag": _b64(self.tag),
                "mode": self.mode,
            },
            separators=(",", ":"),
        )

    @classmethod
    def from_wire(cls, text: str) -> "Envelope":
        try:
            d = json.loads(text)
            env = cls(
                mode=d["mode"],
                nonce=_unb64(d["nonce"]),
                body=_unb64(d["body"]),
                tag=_unb64(d["tag"]),
                sealed_key=_unb64(d.get("sealed_key")),
            )
        except (ValueError, KeyError, TypeError) as exc:
            raise DecryptFailure(f"malformed envelope: {exc}") from exc
        if env.mode not in (HYBRID, PRENEG):
            raise DecryptFailure(f"unknown envelope mode {env.mode!r}")
        return env


def _aead_seal(key: bytes, payload: bytes, aad: bytes) -> tuple[bytes, bytes, bytes]:
    nonce = os.urandom(NONCE_BYTES)
    sealed = AESGCM(key).encrypt(nonce, payload, aad)
    return nonce, sealed[:-TAG_BYTES], sealed[-TAG_BYTES:]


def _aead_open(key: bytes, env: Envelope, aad: bytes) -> bytes:
    try:
        return AESGCM(key).decrypt(env.nonce, env.body + env.tag, aad)
    except (InvalidTag, ValueError) as exc:
        raise DecryptFailure("authentication failed") from exc


def wrap_key(key: bytes, recipient_pk: rsa.RSAPublicKey) -> bytes:
    stats.bump()
    return recipient_pk.encrypt(key, _OAEP)


def unwrap_key(sealed: bytes, sk: rsa.RSAPrivateKey) -> bytes:
    stats.bump()
    try:
        return sk.decrypt(sealed, _OAEP)
    except ValueError as exc:
        raise DecryptFailure("cannot unwrap content key") from exc


def seal(payload: bytes, recipient_pk: rsa.RSAPublicKey) -> Envelope:
    if not payload:
        raise EncryptFailure("refusing to seal an empty payload")
    content_key = AESGCM.generate_key(bit_length=8 * CONTENT_KEY_BYTES)
    try:
        sealed_key = wrap_key(content_key, recipient_pk)
    except ValueError as exc:
        raise EncryptFailure(str(exc)) from exc
    # binding the wrapped key as AAD stops key/body splicing across envelopes
    nonce, body, tag = _aead_seal(content_key, payload, sealed_key)
    return Envelope(HYBRID, nonce, body, tag, sealed_key)


def open_envelope(env: Envelope, sk: rsa.RSAPrivateKey) -> bytes:
    if env.mode != HYBRID or env.sealed_key is None:
        raise DecryptFailure("not a hybrid envelope")
    content_key = unwrap_key(env.sealed_key, sk)
    return _aead_open(content_key, env, env.sealed_key)


# pre-negotiated symmetric keys ------------------------------------------------


@dataclass
class PrenegKeyTable:
    """Symmetric keys for one node.

    ``generated[p]`` is the key this node made for peer ``p``; it opens
    messages arriving from ``p``. ``received[p]`` is the key ``p`` made for
    this node; it seals messages going to ``p``.
    """

    node: int
    generated: dict[int, bytes] = field(default_factory=dict, repr=False)
    received: dict[int, bytes] = field(default_factory=dict, repr=False)

    def accept(self, from_node: int, sealed: bytes, sk: rsa.RSAPrivateKey) -> None:
        self.received[from_node] = unwrap_key(sealed, sk)

    def has_key_for(self, peer: int) -> bool:
        return peer in self.received


def preneg_publish(
    node: int, peers: Mapping[int, rsa.RSAPublicKey]
) -> tuple[PrenegKeyTable, list[tuple[int, bytes]]]:
    """Make one fresh key per peer and wrap each with that peer's public key.

    Returns the generator's table and the ``(peer, wrapped_key)`` entries to
    post to the controller.
    """
    table = PrenegKeyTable(node)
    entries = []
    for peer, pk in sorted(peers.items()):
        key = AESGCM.generate_key(bit_length=8 * CONTENT_KEY_BYTES)
        table.generated[peer] = key
        entries.append((peer, wrap_key(key, pk)))
    return table, entries


def _route(src: int, dst: int) -> bytes:
    return f"{src}->{dst}".encode("ascii")


def seal_preneg(payload: bytes, table: PrenegKeyTable, to: int) -> Envelope:
    if not payload:
        raise EncryptFailure("refusing to seal an empty payload")
    try:
        key = table.received[to]
    except KeyError:
        raise UnknownPeer(f"no pre-negotiated key for node {to}") from None
    nonce, body, tag = _aead_seal(key, payload, _route(table.node, to))
    return Envelope(PRENEG, nonce, body, tag)


def open_preneg(env: Envelope, table: PrenegKeyTable, from_node: int) -> bytes:
    if env.mode != PRENEG:
        raise DecryptFailure("not a pre-negotiated envelope")
    try:
        key = table.generated[from_node]
    except KeyError:
        raise UnknownPeer(f"no key generated for node {from_node}") from None
    return _aead_open(key, env, _route(from_node, table.node))
