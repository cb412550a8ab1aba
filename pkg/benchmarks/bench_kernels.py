"""Time the compiled ring kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--sizes 10,1000,100000] [--repeat 20]
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from safeagg.ring import _backend


def cases(k, n: int, rng):
    a = rng.integers(0, 2**64, size=n, dtype=np.uint64)
    b = rng.integers(0, 2**64, size=n, dtype=np.uint64)
    values = rng.integers(-(2**30), 2**30, size=n) / 65536.0
    text = k.format_decimal(a)
    return {
        "add_mod": lambda: k.add_mod(a, b),
        "sub_mod": lambda: k.sub_mod(a, b),
        "encode_fixed": lambda: k.encode_fixed(values, 65536.0, 2.0**45),
        "decode_fixed": lambda: k.decode_fixed(a, 65536.0),
        "unmask_mean": lambda: k.unmask_mean(a, b, 65536.0, 7.0),
        "format_decimal": lambda: k.format_decimal(a),
        "parse_decimal": lambda: k.parse_decimal(text),
    }


def best_of(fn, repeat: int) -> float:
    number = 5
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main(argv=None) -> None:
    parser = argparse.ArgumentParser()
    parser.add_argument("--sizes", default="10,1000,100000")
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args(argv)

    compiled = _backend.compiled()
    if compiled is None:
        print("compiled kernels not built; only the fallback can be timed")
    backends = [("python", _backend.fallback)] + ([("cython", compiled)] if compiled else [])

    print(f"{'kernel':<16}{'n':>8}" + "".join(f"{name:>14}" for name, _ in backends) + ("   speedup" if compiled else ""))
    for n in (int(s) for s in args.sizes.split(",")):
        rng = np.random.default_rng(n)
        per_backend = [cases(k, n, rng) for _, k in backends]
        for kernel in per_backend[0]:
            times = [best_of(c[kernel], args.repeat) for c in per_backend]
            row = f"{kernel:<16}{n:>8}" + "".join(f"{t * 1e6:>12.1f}us" for t in times)
            if compiled:
                row += f"{times[0] / times[1]:>9.1f}x"
            print(row)


if __name__ == "__main__":
    main()
