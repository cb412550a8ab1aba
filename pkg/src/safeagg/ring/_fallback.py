"""Pure-Python (numpy) ring kernels, used when the compiled module is absent."""

from __future__ import annotations

import numpy as np

NAME = "python"

_U64_MAX = (1 << 64) - 1


def add_mod(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ValueError("length mismatch")
    return np.add(a, b, dtype=np.uint64)


def sub_mod(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ValueError("length mismatch")
    return np.subtract(a, b, dtype=np.uint64)


def encode_fixed(values: np.ndarray, scale: float, limit: float) -> np.ndarray:
    with np.errstate(over="ignore", invalid="ignore"):
        scaled = np.rint(values * scale)
        bad = ~np.isfinite(scaled) | (np.abs(scaled) >= limit)
    if bad.any():
        i = int(np.argmax(bad))
        raise OverflowError(f"value {values[i]!r} at index {i} exceeds fixed-point headroom")
    return scaled.astype(np.int64).view(np.uint64)


def decode_fixed(v: np.ndarray, scale: float) -> np.ndarray:
    return v.view(np.int64).astype(np.float64) / scale


def unmask_mean(total: np.ndarray, mask: np.ndarray, scale: float, count: float) -> np.ndarray:
    return decode_fixed(sub_mod(total, mask), scale) / count


def format_decimal(v: np.ndarray) -> str:
    return " ".join(map(str, v.tolist()))


def parse_decimal(text: str) -> np.ndarray:
    tokens = text.replace(",", " ").split()
    for tok in tokens:
        if not (tok.isascii() and tok.isdigit()):
            raise ValueError(f"invalid ring residue {tok!r}")
    try:
        return np.fromiter((int(t) for t in tokens), dtype=np.uint64, count=len(tokens))
    except OverflowError as exc:
        raise ValueError(f"ring residue exceeds {_U64_MAX}") from exc
