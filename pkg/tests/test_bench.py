import csv
import io
import statistics

import numpy as np
import pytest

from safeagg.bench import (
    CSV_COLUMNS,
    DEEP_EDGE_K,
    DEFAULT_K,
    Experiment,
    bon_messages,
    chain_messages,
    emit_report,
    failover_overhead,
    fit_timeout,
    format_summary,
    insec_messages,
    linear_r2,
    oracle_average,
    run_experiment,
    run_insec,
)
from safeagg.bench.harness import RunRecord, RunStats
from safeagg.errors import InsufficientSamples, MaxAttemptsExceeded
from safeagg.controller import PollConfig


def test_experiment_validation():
    for bad in (
        dict(protocol="bon"),
        dict(transport="udp"),
        dict(groups=0),
        dict(nodes=8, groups=3),
        dict(repeats=0),
        dict(failures={9: "start"}),
        dict(failures={2: "later"}),
    ):
        with pytest.raises(ValueError):
            Experiment(**bad)


def test_chains_split_contiguously():
    assert Experiment(nodes=12, groups=4).chains == [(1, 2, 3), (4, 5, 6), (7, 8, 9), (10, 11, 12)]
    assert [len(c) for c in Experiment(nodes=13, groups=3).chains] == [5, 4, 4]


def test_oracle_only_counts_contributors():
    e = Experiment(nodes=5, failures={2: "start", 3: "after_post"})
    values = {k: np.array([float(k)]) for k in range(1, 6)}
    weights = {k: 1.0 for k in range(1, 6)}
    assert oracle_average(e, values, weights).tolist() == [(1 + 3 + 4 + 5) / 4]


# insec --------------------------------------------------------------------------------


def test_insec_three_nodes():
    stats = run_insec(3, 1, seed=0)
    (rec,) = stats.records
    assert rec.correct and rec.messages == insec_messages(3) == 6


def test_insec_values_one_two_three(monkeypatch):
    from safeagg.bench import harness

    monkeypatch.setattr(harness, "_values", lambda e, r: ({k: np.array([float(k)]) for k in (1, 2, 3)},
                                                          {k: 1.0 for k in (1, 2, 3)}))
    (rec,) = run_insec(3, 1).records
    assert rec.averages[1] == [2.0]


def test_insec_hundred_nodes():
    (rec,) = run_insec(100, 1).records
    assert rec.correct and rec.messages == 200


# chain experiments --------------------------------------------------------------------


def test_fifteen_nodes():
    (rec,) = run_experiment(Experiment(nodes=15)).records
    assert rec.correct and rec.messages == 60
    protocol = {k: v for k, v in rec.by_endpoint.items() if k != "monitor_state"}
    assert protocol == {"post_aggregate": 15, "check_aggregate": 15, "get_aggregate": 15,
                               "post_average": 1, "get_average": 14}


def test_four_groups_of_three():
    (rec,) = run_experiment(Experiment(nodes=12, groups=4)).records
    assert rec.correct
    assert rec.messages == chain_messages(12, g=4) == 52
    assert rec.contributors == 12


def test_nodes_four_to_six_fail_in_twenty_four():
    e = Experiment(nodes=24, failures={4: "start", 5: "start", 6: "start"})
    (rec,) = run_experiment(e).records
    assert rec.correct and rec.contributors == 21
    # counted over the 21 learners that take part
    assert rec.messages == chain_messages(21, f=3) == 90


@pytest.mark.parametrize("nodes", [5, 8])
@pytest.mark.parametrize("traverse_again", [False, True])
def test_initiator_restart_count(nodes, traverse_again):
    # aborted first pass 4(N-1)+1, one election call per survivor, then a clean pass of the
    # survivors; keeping the dead initiator in the chain costs one more skip
    tiny = PollConfig(poll_time=0.3, yield_time=0.02, aggregation_timeout=1.0)
    e = Experiment(nodes=nodes, failures={1: "after_post"}, timeouts=tiny, exclude_failed_initiator=not traverse_again)
    (rec,) = run_experiment(e).records
    live = nodes - 1
    assert rec.correct and rec.attempts == 2
    assert rec.messages == (4 * live + 1) + live + 4 * live + (2 if traverse_again else 0)


@pytest.mark.parametrize("protocol", ["saf", "safe"])
def test_both_chain_protocols_are_exact(protocol):
    stats = run_experiment(Experiment(protocol=protocol, nodes=6, features=20, repeats=2, seed=7))
    assert stats.all_correct
    assert [r.messages for r in stats.records] == [24, 24]


def test_preneg_key_mode():
    (rec,) = run_experiment(Experiment(nodes=4, key_mode="preneg")).records
    assert rec.correct and rec.asymmetric_ops == 0


def test_http_transport():
    (rec,) = run_experiment(Experiment(nodes=4, transport="http")).records
    assert rec.correct and rec.messages == 16


def test_weighted_experiment():
    (rec,) = run_experiment(Experiment(nodes=5, weighted=True, seed=3)).records
    assert rec.correct and rec.messages == 20


def test_seeds_reproduce_values():
    a = run_experiment(Experiment(nodes=4, seed=11)).records[0]
    b = run_experiment(Experiment(nodes=4, seed=11)).records[0]
    c = run_experiment(Experiment(nodes=4, seed=12)).records[0]
    assert a.expected == b.expected != c.expected


def test_two_contributors_abort_is_recorded():
    (rec,) = run_experiment(Experiment(nodes=4, failures={2: "start", 3: "start"})).records
    assert rec.aborted


def test_max_attempts_propagates():
    tiny = PollConfig(poll_time=0.05, yield_time=0.01, aggregation_timeout=0.2)
    e = Experiment(nodes=5, failures={1: "after_post"}, timeouts=tiny, max_attempts=1)
    with pytest.raises(MaxAttemptsExceeded):
        run_experiment(e)


def test_run_stats_aggregates():
    stats = run_experiment(Experiment(nodes=3, repeats=3))
    assert len(stats.wall_times) == 3
    assert stats.mean_wall == pytest.approx(statistics.fmean(stats.wall_times))
    assert stats.std_wall >= 0


# closed-form models ---------------------------------------------------------------------


def test_chain_message_model():
    assert chain_messages(15) == 60
    assert chain_messages(10, f=3) == 46
    assert chain_messages(5, i=1) == 2 * (20 + 5)
    assert chain_messages(12, g=3) == 51
    assert chain_messages(12, g=1) == 48


def test_bon_model_is_super_linear():
    ns = np.arange(10, 101, 10)
    assert linear_r2(ns, [chain_messages(n) for n in ns]) == pytest.approx(1.0)
    bon = np.array([bon_messages(n) for n in ns])
    assert np.all(np.diff(bon, 2) > 0)


def test_linear_r2():
    assert linear_r2([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
    assert linear_r2([1, 2, 3], [5, 5, 5]) == 1.0
    assert linear_r2([1, 2, 3, 4], [1, 0, 1, 0]) < 0.5


# timeout fitting -------------------------------------------------------------------------


def test_constant_samples_give_constant_predictor():
    predictor = fit_timeout([(n, 1, 2.0) for n in (3, 5, 10, 20)], margin=4.0)
    for n in (3, 7, 50):
        assert predictor(n) == pytest.approx(6.0)


def test_two_distinct_node_counts_is_insufficient():
    with pytest.raises(InsufficientSamples):
        fit_timeout([(3, 1, 1.0), (3, 1, 1.1), (5, 1, 2.0)])
    with pytest.raises(InsufficientSamples):
        fit_timeout([])


def test_predictor_covers_observed_times():
    rng = np.random.default_rng(0)
    samples = [(n, 1, 0.01 * n + 0.001 * n * n + rng.uniform(0, 0.5)) for n in (3, 5, 10, 20, 40) for _ in range(30)]
    predictor = fit_timeout(samples)
    for n, _, t in samples:
        assert predictor(n) >= t


def test_predictor_per_feature_count():
    samples = [(n, f, f * 0.1 * n) for n in (3, 5, 7) for f in (1, 20)]
    predictor = fit_timeout(samples, margin=0.0)
    assert predictor(5, 20) == pytest.approx(10.0)
    with pytest.raises(ValueError):
        predictor(5)
    with pytest.raises(ValueError):
        predictor(5, 3)


# failover overhead ----------------------------------------------------------------------


def test_no_failures_means_no_overhead():
    points = failover_overhead(Experiment(nodes=5, repeats=5))
    assert all(p.allowance == 0 for p in points)
    overheads = [p.overhead for p in points]
    clean = [p.clean_time for p in points]
    band = 3 * statistics.stdev(clean) + 0.05
    assert abs(statistics.fmean(overheads)) <= band


@pytest.mark.parametrize("failed", [{4: "start"}, {4: "start", 5: "start", 6: "start"}])
def test_failure_budget_is_shared(failed):
    (point,) = failover_overhead(Experiment(nodes=9, failures=failed), budget=0.6)
    assert point.allowance == 0.6
    assert point.n == 9 and point.f == len(failed)
    # the stall allowance accounts for nearly all the extra time
    assert point.failed_time >= 0.6
    assert point.overhead < 0.6


# report ---------------------------------------------------------------------------------


def fake_stats(times, n=5):
    stats = RunStats(Experiment(nodes=n, repeats=len(times)))
    for i, t in enumerate(times):
        stats.records.append(RunRecord("safe", n, 1, 1, 0, i, t, 4 * n, True))
    return stats


def test_one_run_one_row():
    text, summary = emit_report([fake_stats([0.5])])
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == list(CSV_COLUMNS)
    assert len(rows) == 2
    assert rows[1][:6] == ["safe", "5", "1", "1", "0", "0"]
    assert summary[0]["wall_std"] == 0.0


def test_thirty_repeats_three_sigma_band():
    times = list(np.linspace(1.0, 2.0, 30))
    _, (row,) = emit_report([fake_stats(times)])
    assert row["k"] == DEFAULT_K == 3
    assert row["band_hi"] - row["wall_mean"] == pytest.approx(3 * statistics.stdev(times))
    assert row["band_lo"] == pytest.approx(row["wall_mean"] - 3 * statistics.stdev(times))


def test_deep_edge_four_sigma_band():
    times = [1.0, 1.2, 1.1, 0.9, 1.3]
    _, (row,) = emit_report([fake_stats(times)], k=DEEP_EDGE_K)
    assert row["band_hi"] - row["wall_mean"] == pytest.approx(4 * statistics.stdev(times))
    assert "4σ" in format_summary([row])


def test_report_writes_file(tmp_path):
    out = tmp_path / "r.csv"
    text, _ = emit_report([fake_stats([0.1, 0.2]), fake_stats([0.3], n=7)], str(out))
    assert out.read_text() == text
    assert len(text.splitlines()) == 4


def test_report_from_real_run():
    text, (row,) = emit_report([run_experiment(Experiment(nodes=3, repeats=2))])
    assert row["all_correct"] and row["messages_mean"] == 12
    assert text.count("\n") == 3
