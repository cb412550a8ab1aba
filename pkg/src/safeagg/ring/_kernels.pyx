# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled ring kernels. Must stay bit-identical to ``_fallback``."""

import numpy as np

from libc.math cimport isfinite, nearbyint, fabs
from libc.stdint cimport int64_t, uint64_t
from libc.stdlib cimport free, malloc
from cpython.bytes cimport PyBytes_FromStringAndSize

NAME = "cython"

cdef uint64_t U64_MAX = 18446744073709551615ULL


def add_mod(const uint64_t[::1] a, const uint64_t[::1] b):
    cdef Py_ssize_t i, n = a.shape[0]
    if b.shape[0] != n:
        raise ValueError("length mismatch")
    out = np.empty(n, dtype=np.uint64)
    cdef uint64_t[::1] o = out
    with nogil:
        for i in range(n):
            o[i] = a[i] + b[i]
    return out


def sub_mod(const uint64_t[::1] a, const uint64_t[::1] b):
    cdef Py_ssize_t i, n = a.shape[0]
    if b.shape[0] != n:
        raise ValueError("length mismatch")
    out = np.empty(n, dtype=np.uint64)
    cdef uint64_t[::1] o = out
    with nogil:
        for i in range(n):
            o[i] = a[i] - b[i]
    return out


def encode_fixed(const double[::1] values, double scale, double limit):
    cdef Py_ssize_t i, bad = -1, n = values.shape[0]
    cdef double x
    out = np.empty(n, dtype=np.uint64)
    cdef uint64_t[::1] o = out
    with nogil:
        for i in range(n):
            x = nearbyint(values[i] * scale)
            if not isfinite(x) or fabs(x) >= limit:
                bad = i
                break
            o[i] = <uint64_t>(<int64_t>x)
    if bad >= 0:
        raise OverflowError(
            f"value {values[bad]!r} at index {bad} exceeds fixed-point headroom"
        )
    return out


def decode_fixed(const uint64_t[::1] v, double scale):
    cdef Py_ssize_t i, n = v.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            o[i] = (<double>(<int64_t>v[i])) / scale
    return out


def unmask_mean(const uint64_t[::1] total, const uint64_t[::1] mask, double scale, double count):
    cdef Py_ssize_t i, n = total.shape[0]
    if mask.shape[0] != n:
        raise ValueError("length mismatch")
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            o[i] = ((<double>(<int64_t>(total[i] - mask[i]))) / scale) / count
    return out


def format_decimal(const uint64_t[::1] v):
    cdef Py_ssize_t i, n = v.shape[0], pos = 0, k
    cdef uint64_t x
    cdef char digits[20]
    if n == 0:
        return ""
    cdef char *buf = <char *>malloc(n * 21)
    if buf == NULL:
        raise MemoryError()
    try:
        with nogil:
            for i in range(n):
                if i:
                    buf[pos] = 32
                    pos += 1
                x = v[i]
                k = 0
                while True:
                    digits[k] = <char>(48 + x % 10)
                    k += 1
                    x //= 10
                    if x == 0:
                        break
                while k:
                    k -= 1
                    buf[pos] = digits[k]
                    pos += 1
        return PyBytes_FromStringAndSize(buf, pos).decode("ascii")
    finally:
        free(buf)


def parse_decimal(str text):
    cdef bytes raw = text.encode("ascii")
    cdef const unsigned char[::1] s = raw
    cdef Py_ssize_t i = 0, n = s.shape[0], count = 0, err = -1
    cdef uint64_t acc
    cdef unsigned char c
    cdef int in_token = 0
    # upper bound on token count
    out = np.empty(n // 2 + 1, dtype=np.uint64)
    cdef uint64_t[::1] o = out
    with nogil:
        acc = 0
        for i in range(n):
            c = s[i]
            if 48 <= c <= 57:
                if acc > (U64_MAX - (c - 48)) // 10:
                    err = i
                    break
                acc = acc * 10 + (c - 48)
                in_token = 1
            elif c == 32 or c == 9 or c == 10 or c == 13 or c == 44:
                if in_token:
                    o[count] = acc
                    count += 1
                    acc = 0
                    in_token = 0
            else:
                err = i
                break
        if err < 0 and in_token:
            o[count] = acc
            count += 1
    if err >= 0:
        raise ValueError(f"invalid ring residue text near offset {err}")
    return out[:count].copy()
