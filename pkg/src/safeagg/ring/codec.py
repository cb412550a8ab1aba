"""Fixed-point vectors in Z_2^64 and the masked arithmetic built on them.

All sums wrap modulo 2**64, which is what makes unmasking exact: adding a
uniformly random mask and later subtracting it returns the original residues
bit for bit, no matter how large the mask was.
"""

from __future__ import annotations

import hashlib
import secrets
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms

from ..errors import LengthMismatch, TooFewContributors
from ._backend import kernels

MODULUS = 1 << 64
MIN_CONTRIBUTORS = 3
DEFAULT_SCALE = 1 << 16

_MASK_DOMAIN = b"safeagg/mask/v1"


class RingVector:
    """Immutable vector of residues mod 2**64."""

    __slots__ = ("_elems",)

    def __init__(self, elems: Iterable[int] | np.ndarray):
        if isinstance(elems, np.ndarray) and elems.dtype == np.uint64:
            arr = np.ascontiguousarray(elems)
            if arr is elems and elems.flags.writeable:
                arr = arr.copy()
        else:
            arr = np.array([int(e) % MODULUS for e in elems], dtype=np.uint64)
        if arr.ndim != 1:
            raise ValueError("ring vectors are one-dimensional")
        arr.setflags(write=False)
        self._elems = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "RingVector":
        # kernels always return fresh arrays; skip the defensive copy
        obj = cls.__new__(cls)
        arr.setflags(write=False)
        obj._elems = arr
        return obj

    @classmethod
    def zeros(cls, length: int) -> "RingVector":
        return cls._wrap(np.zeros(length, dtype=np.uint64))

    @property
    def elems(self) -> np.ndarray:
        return self._elems

    def __len__(self) -> int:
        return int(self._elems.shape[0])

    def __iter__(self):
        return iter(self._elems.tolist())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RingVector):
            return NotImplemented
        return np.array_equal(self._elems, other._elems)

    def __hash__(self) -> int:
        return hash(self._elems.tobytes())

    def __add__(self, other: "RingVector") -> "RingVector":
        return ring_add(self, other)

    def __sub__(self, other: "RingVector") -> "RingVector":
        return ring_sub(self, other)

    def __repr__(self) -> str:
        head = self._elems[:4].tolist()
        more = ", ..." if len(self) > 4 else ""
        return f"RingVector({head}{more}, len={len(self)})"

    # wire forms

    def to_text(self) -> str:
        """Space-separated unsigned decimal residues."""
        return kernels.format_decimal(self._elems)

    @classmethod
    def from_text(cls, text: str) -> "RingVector":
        return cls._wrap(kernels.parse_decimal(text))

    def to_bytes(self) -> bytes:
        """Little-endian 8 bytes per residue."""
        return self._elems.astype("<u8", copy=False).tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "RingVector":
        if len(data) % 8:
            raise ValueError("ring vector byte length must be a multiple of 8")
        return cls._wrap(np.frombuffer(data, dtype="<u8").astype(np.uint64))


@dataclass(frozen=True)
class FixedPointCodec:
    """Maps reals to ring residues as round(value * scale), two's complement.

    ``max_contributors`` reserves headroom so that the sum of that many
    encoded values still fits in the signed 63-bit range: each scaled value
    must satisfy |v| < 2**62 / max_contributors. The defaults (2**16 scale,
    2**17 contributors) allow |value| < 2**29.
    """

    scale: int = DEFAULT_SCALE
    max_contributors: int = 1 << 17

    def __post_init__(self):
        if self.scale < 1 or self.scale & (self.scale - 1):
            raise ValueError("scale must be a positive power of two")
        if self.max_contributors < 1:
            raise ValueError("max_contributors must be positive")

    @property
    def limit(self) -> float:
        return float((1 << 62) // self.max_contributors)

    @property
    def resolution(self) -> float:
        return 1.0 / self.scale

    def encode(self, values) -> RingVector:
        return encode(values, self)

    def decode(self, v: RingVector) -> np.ndarray:
        return decode(v, self)


def encode(values, codec: FixedPointCodec = FixedPointCodec()) -> RingVector:
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError("expected a one-dimensional vector of reals")
    return RingVector._wrap(kernels.encode_fixed(arr, float(codec.scale), codec.limit))


def decode(v: RingVector, codec: FixedPointCodec = FixedPointCodec()) -> np.ndarray:
    """Residues >= 2**63 come back negative; wrapped sums decode as wrapped."""
    return kernels.decode_fixed(v.elems, float(codec.scale))


def _check_lengths(a: RingVector, b: RingVector) -> None:
    if len(a) != len(b):
        raise LengthMismatch(f"ring vectors differ in length: {len(a)} != {len(b)}")


def ring_add(a: RingVector, b: RingVector) -> RingVector:
    _check_lengths(a, b)
    return RingVector._wrap(kernels.add_mod(a.elems, b.elems))


def ring_sub(a: RingVector, b: RingVector) -> RingVector:
    _check_lengths(a, b)
    return RingVector._wrap(kernels.sub_mod(a.elems, b.elems))


def ring_sum(vectors: Sequence[RingVector]) -> RingVector:
    if not vectors:
        raise ValueError("nothing to sum")
    total = vectors[0]
    for v in vectors[1:]:
        total = ring_add(total, v)
    return total


@dataclass(frozen=True)
class Mask:
    seed: int
    vector: RingVector = field(repr=False)

    def __len__(self) -> int:
        return len(self.vector)


def _keystream(seed: int, nbytes: int) -> bytes:
    key = hashlib.sha256(_MASK_DOMAIN + seed.to_bytes(8, "little")).digest()
    # 16-byte nonce: 32-bit block counter followed by a 96-bit nonce, all zero
    enc = Cipher(algorithms.ChaCha20(key, bytes(16)), mode=None).encryptor()
    return enc.update(bytes(nbytes))


def gen_mask(seed: int, length: int) -> Mask:
    """Expand one 64-bit seed into ``length`` uniform residues.

    Element j is the little-endian word at keystream bytes [8j, 8j+8) of
    ChaCha20 keyed by SHA-256(domain || seed), so shorter masks are prefixes
    of longer ones.
    """
    if length < 1:
        raise ValueError("mask length must be at least 1")
    if not 0 <= seed < MODULUS:
        raise ValueError("seed must be a 64-bit unsigned integer")
    stream = _keystream(seed, 8 * length)
    return Mask(seed, RingVector._wrap(np.frombuffer(stream, dtype="<u8").astype(np.uint64)))


def fresh_mask(length: int) -> Mask:
    return gen_mask(secrets.randbits(64), length)


def finalize_average(
    masked_total: RingVector,
    mask: Mask,
    contributors: int,
    codec: FixedPointCodec = FixedPointCodec(),
) -> np.ndarray:
    """Strip the mask from a chain total and divide by the contributor count."""
    if contributors < MIN_CONTRIBUTORS:
        raise TooFewContributors(
            f"{contributors} contributors; at least {MIN_CONTRIBUTORS} are required"
        )
    _check_lengths(masked_total, mask.vector)
    return kernels.unmask_mean(
        masked_total.elems, mask.vector.elems, float(codec.scale), float(contributors)
    )
