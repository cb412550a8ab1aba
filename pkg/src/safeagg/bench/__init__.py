from .fit import (
    DEFAULT_MARGIN,
    OverheadPoint,
    TimeoutPredictor,
    bon_messages,
    chain_messages,
    failover_overhead,
    fit_timeout,
    insec_messages,
    linear_r2,
)
from .harness import Experiment, RunRecord, RunStats, key_pool, oracle_average, run_experiment, run_insec
from .report import CSV_COLUMNS, DEEP_EDGE_K, DEFAULT_K, emit_report, format_summary, summarize

__all__ = [
    "CSV_COLUMNS",
    "DEEP_EDGE_K",
    "DEFAULT_K",
    "DEFAULT_MARGIN",
    "Experiment",
    "OverheadPoint",
    "RunRecord",
    "RunStats",
    "TimeoutPredictor",
    "bon_messages",
    "chain_messages",
    "emit_report",
    "failover_overhead",
    "fit_timeout",
    "format_summary",
    "insec_messages",
    "key_pool",
    "linear_r2",
    "oracle_average",
    "run_experiment",
    "run_insec",
    "summarize",
]
