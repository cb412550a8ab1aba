from ._backend import BACKEND
from .codec import (
    DEFAULT_SCALE,
    MIN_CONTRIBUTORS,
    MODULUS,
    FixedPointCodec,
    Mask,
    RingVector,
    decode,
    encode,
    finalize_average,
    fresh_mask,
    gen_mask,
    ring_add,
    ring_sub,
    ring_sum,
)

__all__ = [
    "BACKEND",
    "DEFAULT_SCALE",
    "MIN_CONTRIBUTORS",
    "MODULUS",
    "FixedPointCodec",
    "Mask",
    "RingVector",
    "decode",
    "encode",
    "finalize_average",
    "fresh_mask",
    "gen_mask",
    "ring_add",
    "ring_sub",
    "ring_sum",
]
