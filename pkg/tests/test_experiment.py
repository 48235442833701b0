"""Trial aggregation, savings arithmetic, recommendation, record IO."""

import io

import pytest
from hypothesis import given
from hypothesis import strategies as st

from dnsrace.economics import Threshold
from dnsrace.experiment import (
    CSV_HEADER,
    AnalysisError,
    ExperimentConfig,
    ExperimentError,
    ReplicationStats,
    TrialRecord,
    aggregate,
    build_report,
    extra_traffic_bytes,
    incremental_savings,
    load_config,
    load_records,
    nearest_rank,
    normalized_savings,
    read_records_csv,
    recommend_k,
    relative_improvement,
    run_experiment,
    sidecar_path,
    write_records_csv,
    write_records_json,
)
from dnsrace.resolver import RankedServerList, ServerStats, UpstreamServer
from dnsrace.simulator import Constant, ShiftedExponential, SimTransport, SimUpstream, SimWorld


def rec(k, latency, sent=29, recv=45, query=29, winner=45, timed_out=False, ts=0.0):
    return TrialRecord(
        target="t.test",
        k=k,
        latency_ms=latency,
        timed_out=timed_out,
        bytes_sent_total=sent,
        bytes_received_total=recv,
        timestamp=ts,
        query_bytes=query,
        winner_wire_bytes=winner,
    )


def exp_world(count, mean_ms=40.0, master_seed=12):
    upstreams = tuple(
        SimUpstream(f"u{i}", ShiftedExponential(5.0, mean_ms), seed=i) for i in range(count)
    )
    return SimWorld(upstreams, master_seed=master_seed)


def test_record_invariants():
    with pytest.raises(ExperimentError):
        rec(0, 10.0)
    with pytest.raises(ExperimentError):
        rec(1, None)
    with pytest.raises(ExperimentError):
        rec(1, 10.0, timed_out=True)


def test_extra_traffic_rules():
    assert extra_traffic_bytes(rec(1, 10.0, sent=29, recv=500)) == 0.0
    detailed = rec(2, 10.0, sent=58, recv=90, query=29, winner=45)
    assert extra_traffic_bytes(detailed) == 148 - 74
    csv_only = TrialRecord("t.test", 4, 10.0, False, 116, 180, 0.0)
    assert extra_traffic_bytes(csv_only) == pytest.approx(296 * 3 / 4)


def test_nearest_rank():
    values = sorted(float(v) for v in range(1, 21))
    assert nearest_rank(values, 95) == 19.0
    assert nearest_rank(values, 100) == 20.0
    assert nearest_rank(values, 50) == 10.0
    assert nearest_rank([7.0], 95) == 7.0
    assert nearest_rank([100.0, 300.0], 95) == 300.0
    with pytest.raises(AnalysisError):
        nearest_rank([], 95)


def test_aggregate_single_record():
    rows = aggregate([rec(1, 100.0)])
    assert len(rows) == 1
    row = rows[0]
    assert row.k == 1 and row.n == 1
    assert row.mean_ms == row.median_ms == row.p95_ms == 100.0
    assert row.mean_extra_kb == 0.0


def test_aggregate_exact_arithmetic():
    records = [
        rec(1, 100.0),
        rec(1, 300.0),
        rec(2, 50.0, sent=58, recv=90),
        rec(2, 150.0, sent=58, recv=90),
    ]
    rows = aggregate(records)
    k1, k2 = rows
    assert (k1.mean_ms, k1.median_ms, k1.p95_ms) == (200.0, 100.0, 300.0)
    assert (k2.mean_ms, k2.mean_extra_kb) == (100.0, 74 / 1024)
    improvement = relative_improvement(rows, "mean")
    assert improvement == {1: 0.0, 2: 50.0}
    norm = normalized_savings(rows, "mean")
    incr = incremental_savings(rows, "mean")
    assert norm[2] == pytest.approx(100.0 * 1024 / 74)
    assert incr[2] == pytest.approx(norm[2])


def test_aggregate_median_is_lower_middle():
    rows = aggregate([rec(1, v) for v in (10.0, 20.0, 30.0, 40.0)])
    assert rows[0].median_ms == 20.0


def test_aggregate_counts_timeout_traffic_but_not_latency():
    records = [
        rec(2, 40.0, sent=58, recv=90),
        rec(2, None, sent=58, recv=0, timed_out=True, winner=0),
    ]
    row = aggregate(records)[0]
    assert row.n == 1 and row.mean_ms == 40.0
    # timed-out trial: extra = 58 + 0 - (29 + 0) = 29 bytes, averaged over both
    assert row.mean_extra_kb == pytest.approx((74 + 29) / 2 / 1024)


def test_aggregate_permutation_invariant():
    records = [rec(k, 10.0 * k + i, sent=29 * k, recv=45 * k, winner=45) for k in (1, 2, 3) for i in range(5)]
    forward = aggregate(records)
    backward = aggregate(list(reversed(records)))
    assert forward == backward


def test_aggregate_all_timeout_k_omitted_with_warning():
    records = [rec(1, 50.0), rec(2, None, timed_out=True, winner=0)]
    with pytest.warns(UserWarning, match="k=2.*timed out"):
        rows = aggregate(records)
    assert [r.k for r in rows] == [1]
    with pytest.raises(AnalysisError):
        aggregate([])


def stats_row(k, mean, extra_kb, n=10):
    return ReplicationStats(k=k, n=n, mean_ms=mean, median_ms=mean, p95_ms=mean, mean_extra_kb=extra_kb)


def test_savings_on_hand_built_rows():
    rows = [stats_row(1, 300.0, 0.0), stats_row(2, 200.0, 0.5), stats_row(3, 150.0, 1.5)]
    assert normalized_savings(rows, "mean") == pytest.approx({2: 200.0, 3: 100.0})
    assert incremental_savings(rows, "mean") == pytest.approx({2: 200.0, 3: 50.0})
    assert relative_improvement(rows, "mean")[3] == pytest.approx(50.0)


def test_savings_error_cases():
    with pytest.raises(AnalysisError, match="baseline"):
        normalized_savings([stats_row(2, 100.0, 1.0)])
    with pytest.raises(AnalysisError, match="no extra traffic"):
        normalized_savings([stats_row(1, 300.0, 0.0), stats_row(2, 200.0, 0.0)])
    with pytest.raises(AnalysisError, match="did not increase"):
        incremental_savings([stats_row(1, 300.0, 0.0), stats_row(2, 200.0, 1.0), stats_row(3, 150.0, 1.0)])


def test_incremental_skips_gap():
    rows = [stats_row(1, 300.0, 0.0), stats_row(2, 200.0, 1.0), stats_row(4, 100.0, 3.0)]
    assert set(incremental_savings(rows, "mean")) == {2}


def test_recommend_k_prefix_rule():
    assert recommend_k({2: 40.0, 3: 12.0, 4: 6.0}, 10.0) == 3
    assert recommend_k({2: 40.0, 3: 12.0, 4: 6.0}, Threshold(10.0)) == 3
    assert recommend_k({2: 5.0, 3: 50.0}, 10.0) == 1
    assert recommend_k({2: 40.0, 3: 12.0, 4: 6.0}, 1000.0) == 1
    assert recommend_k({2: 40.0, 3: 12.0, 4: 6.0}, 0.0) == 4
    assert recommend_k({2: 10.0}, 10.0) == 2  # break-even step counts
    assert recommend_k({}, 10.0) == 1


@given(
    incr=st.dictionaries(st.integers(2, 8), st.floats(0, 100, allow_nan=False), min_size=1),
    lo=st.floats(0, 50, allow_nan=False),
    hi=st.floats(0, 50, allow_nan=False),
)
def test_recommend_k_monotone_in_threshold(incr, lo, hi):
    lo, hi = min(lo, hi), max(lo, hi)
    assert recommend_k(incr, lo) >= recommend_k(incr, hi)


def test_config_validation_and_load(tmp_path):
    with pytest.raises(ExperimentError):
        ExperimentConfig(targets=(), trials=1)
    with pytest.raises(ExperimentError):
        ExperimentConfig(targets=("a.test",), trials=0)
    with pytest.raises(ExperimentError):
        ExperimentConfig(targets=("a.test",), trials=1, k_max=0)
    with pytest.raises(ExperimentError):
        ExperimentConfig(targets=("a.test",), trials=1, timeout_ms=0)
    path = tmp_path / "config.json"
    path.write_text('{"targets": ["a.test"], "trials": 5}')
    cfg = load_config(path)
    assert cfg == ExperimentConfig(targets=("a.test",), trials=5, k_max=10, timeout_ms=30000.0, seed=0)
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg


def test_run_experiment_deterministic():
    world = exp_world(3)
    cfg = ExperimentConfig(targets=("a.test", "b.test"), trials=300, k_max=3, timeout_ms=1000.0, seed=42)
    first = run_experiment(cfg, RankedServerList.unranked(SimTransport(world).servers), SimTransport(world))
    second = run_experiment(cfg, RankedServerList.unranked(SimTransport(world).servers), SimTransport(world))
    assert first == second
    out_a, out_b = io.StringIO(), io.StringIO()
    write_records_csv(first, out_a)
    write_records_csv(second, out_b)
    assert out_a.getvalue() == out_b.getvalue()
    reseeded = run_experiment(
        ExperimentConfig(targets=("a.test", "b.test"), trials=300, k_max=3, timeout_ms=1000.0, seed=43),
        RankedServerList.unranked(SimTransport(world).servers),
        SimTransport(world),
    )
    assert reseeded != first


def test_run_experiment_k_draw_coverage():
    world = SimWorld(
        tuple(SimUpstream(f"u{i}", Constant(1.0), seed=i) for i in range(10)), master_seed=1
    )
    transport = SimTransport(world)
    cfg = ExperimentConfig(targets=("a.test",), trials=10_000, k_max=10, timeout_ms=50.0, seed=7)
    records = run_experiment(cfg, RankedServerList.unranked(transport.servers), transport)
    counts = {k: 0 for k in range(1, 11)}
    for r in records:
        counts[r.k] += 1
    assert all(850 <= c <= 1150 for c in counts.values()), counts


def test_run_experiment_k_max_exceeds_servers():
    world = exp_world(2)
    transport = SimTransport(world)
    cfg = ExperimentConfig(targets=("a.test",), trials=1, k_max=3)
    with pytest.raises(ExperimentError, match="k_max"):
        run_experiment(cfg, RankedServerList.unranked(transport.servers), transport)


def test_run_experiment_send_failure_becomes_timeout():
    transport = SimTransport(exp_world(1))
    ranked = RankedServerList.unranked([UpstreamServer("203.0.113.7")])
    cfg = ExperimentConfig(targets=("a.test",), trials=3, k_max=1, timeout_ms=100.0, seed=0)
    records = run_experiment(cfg, ranked, transport)
    assert all(r.timed_out and r.bytes_sent_total == 0 and r.bytes_received_total == 0 for r in records)


def test_report_telescoping_holds_on_simulated_run():
    world = exp_world(4, mean_ms=30.0)
    transport = SimTransport(world)
    cfg = ExperimentConfig(targets=("a.test",), trials=2000, k_max=4, timeout_ms=2000.0, seed=5)
    records = run_experiment(cfg, RankedServerList.unranked(transport.servers), transport)
    report = build_report(records, thresholds={"pick": 10.0})
    by_k = {row.k: row for row in report.rows}
    base = by_k[1].mean_ms
    running = 0.0
    for k in (2, 3, 4):
        delta_kb = by_k[k].mean_extra_kb - by_k[k - 1].mean_extra_kb
        running += by_k[k].incremental_savings_ms_per_kb["mean"] * delta_kb
        assert base - by_k[k].mean_ms == pytest.approx(running, rel=1e-9)
    assert report.thresholds_ms_per_kb == {"pick": 10.0}
    assert report.recommended_k["pick"] >= 1
    assert report.baseline.k == 1
    assert by_k[1].normalized_savings_ms_per_kb is None


def test_report_flags_negative_savings():
    records = [rec(1, 100.0), rec(1, 100.0), rec(2, 150.0, sent=58, recv=90), rec(2, 150.0, sent=58, recv=90)]
    report = build_report(records)
    assert any("negative savings" in flag for flag in report.flags)


def test_report_carries_aggregation_warnings():
    records = [rec(1, 50.0), rec(2, None, timed_out=True, winner=0)]
    report = build_report(records)
    assert any("timed out" in w for w in report.warnings)
    assert report.recommended_k == {}


def test_report_round_trips_to_json():
    import json

    records = [rec(1, 100.0), rec(2, 60.0, sent=58, recv=90)]
    report = build_report(records, thresholds={"both-selfish": Threshold(9.55)})
    payload = json.loads(json.dumps(report.to_dict()))
    assert payload["baseline"]["k"] == 1
    assert payload["recommended_k"]["both-selfish"] >= 1
    assert {row["k"] for row in payload["rows"]} == {1, 2}


def test_csv_round_trip(tmp_path):
    records = [rec(1, 123.456789012345), rec(3, None, sent=87, recv=0, timed_out=True, winner=0, ts=17.25)]
    path = tmp_path / "records.csv"
    write_records_csv(records, path)
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(CSV_HEADER)
    loaded = read_records_csv(path)
    assert loaded[0].latency_ms == 123.456789012345
    assert loaded[0].query_bytes is None  # CSV carries no detail columns
    assert loaded[1].timed_out and loaded[1].latency_ms is None
    assert loaded[1].timestamp == 17.25


def test_csv_rejects_foreign_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("target,k,latency\nx,1,2\n")
    with pytest.raises(ExperimentError, match="header"):
        read_records_csv(path)
    short = tmp_path / "short.csv"
    short.write_text(",".join(CSV_HEADER) + "\nx,1,2\n")
    with pytest.raises(ExperimentError):
        read_records_csv(short)


def test_sidecar_preserves_detail(tmp_path):
    detailed = rec(2, 50.0, sent=58, recv=90)
    detailed.per_server = [
        ServerStats(bytes_sent=29, bytes_received=45, replied=True, reply_latency_ms=50.0),
        ServerStats(bytes_sent=29, bytes_received=45, replied=True, reply_latency_ms=71.5),
    ]
    csv_path = tmp_path / "records.csv"
    write_records_csv([detailed], csv_path)
    write_records_json([detailed], sidecar_path(csv_path))
    loaded = load_records(csv_path)
    assert loaded == [detailed]
    assert loaded[0].per_server[1].reply_latency_ms == 71.5
    # without the sidecar the CSV is authoritative and detail-free
    sidecar_path(csv_path).unlink()
    assert load_records(csv_path)[0].per_server is None
    # a direct .json path reads as JSON
    json_path = tmp_path / "only.json"
    write_records_json([detailed], json_path)
    assert load_records(json_path) == [detailed]


def test_csv_only_analysis_uses_share_estimate(tmp_path):
    records = [rec(1, 100.0), rec(2, 60.0, sent=58, recv=90)]
    path = tmp_path / "records.csv"
    write_records_csv(records, path)
    loaded = load_records(path)
    rows = aggregate(loaded)
    assert rows[1].mean_extra_kb == pytest.approx(148 * 0.5 / 1024)
