from __future__ import annotations

import csv
import io
import statistics
from collections import defaultdict
from typing import Iterable

from .harness import RunStats

CSV_COLUMNS = ("protocol", "n", "F", "g", "f", "repeat", "wall_time", "messages", "correct")
DEFAULT_K = 3
DEEP_EDGE_K = 4


def summarize(stats: Iterable[RunStats], k: float = DEFAULT_K) -> list[dict]:
    """One row per condition: mean wall time with a mean ± k·σ band."""
    groups: dict[tuple, list] = defaultdict(list)
    for s in stats:
        for r in s.records:
            groups[(r.protocol, r.n, r.F, r.g, r.f)].append(r)
    rows = []
    for (protocol, n, F, g, f), records in groups.items():
        times = [r.wall_time for r in records]
        mean = statistics.fmean(times)
        std = statistics.stdev(times) if len(times) > 1 else 0.0
        rows.append({
            "protocol": protocol, "n": n, "F": F, "g": g, "f": f,
            "repeats": len(records),
            "wall_mean": mean,
            "wall_std": std,
            "band_lo": mean - k * std,
            "band_hi": mean + k * std,
            "k": k,
            "messages_mean": statistics.fmean(r.messages for r in records),
            "all_correct": all(r.correct for r in records if not r.aborted),
        })
    return rows


def emit_report(stats: Iterable[RunStats], out=None, k: float = DEFAULT_K) -> tuple[str, list[dict]]:
    """Write per-repeat rows as CSV to ``out`` (path or file) and return (csv text, summary)."""
    stats = list(stats)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for s in stats:
        for r in s.records:
            writer.writerow([r.protocol, r.n, r.F, r.g, r.f, r.repeat, f"{r.wall_time:.6f}", r.messages, r.correct])
    text = buf.getvalue()
    if isinstance(out, str):
        with open(out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    elif out is not None:
        out.write(text)
    return text, summarize(stats, k)


def format_summary(rows: list[dict]) -> str:
    lines = []
    for row in rows:
        lines.append(
            f"{row['protocol']:>5} n={row['n']:<4} F={row['F']:<5} g={row['g']} f={row['f']}  "
            f"{row['wall_mean']:.4f}s ± {row['k']:g}σ [{row['band_lo']:.4f}, {row['band_hi']:.4f}]  "
            f"messages={row['messages_mean']:g} correct={row['all_correct']}"
        )
    return "\n".join(lines)
