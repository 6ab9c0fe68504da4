import statistics

import pytest

from vcverifier import bench
from vcverifier.bench import BenchClient, BenchFixtures, LatencyReport, LocalService, RunRecord


@pytest.fixture(scope="module")
def rig():
    fixtures = BenchFixtures(delay_ms=5).start()
    with LocalService() as local:
        client = BenchClient(local.url, local.admin_token)
        fixtures.provision(client)
        yield client, fixtures
        client.close()
    fixtures.stop()


@pytest.fixture(scope="module")
def reports(rig):
    client, fixtures = rig
    return [bench.run_latency(client, fixtures, platform=p, mode=m, runs=4) for p in "AB" for m in ("cold", "warm")]


def test_parse_server_timing():
    assert bench.parse_server_timing("parse;dur=1.5, evaluate;dur=20") == {"parse": 0.0015, "evaluate": 0.02}
    assert bench.parse_server_timing("") == {}


def test_breakdown_partitions_total():
    rec = RunRecord(0, 0.1, {"parse": 0.001, "resolve": 0.002, "compile": 0.03, "instantiate": 0.004,
                             "evaluate": 0.02}, "stapled", 200)
    b = rec.breakdown()
    assert b["verification"] == 0.02
    assert b["load_instantiate"] == pytest.approx(0.036)
    assert sum(b.values()) == pytest.approx(0.1)


def test_cold_and_warm_series(reports):
    for rep in reports:
        assert len(rep.runs) == 4
        assert all(r.status == 200 for r in rep.runs)
        if rep.mode == "cold":
            assert rep.compilations == 4
            assert {r.source for r in rep.runs} == {"stapled"}
        else:
            assert rep.compilations == 1
            assert {r.source for r in rep.runs} == {"cache"}
            assert all(r.stages["compile"] < 0.05 for r in rep.runs)


def test_csv_rows_and_stddev_from_raw(reports, tmp_path):
    path = tmp_path / "lat.csv"
    assert bench.write_csv(reports, path) == 4 * 3 * len(reports)
    assert path.read_text().splitlines()[1] == ",".join(bench.CSV_COLUMNS)
    rows = bench.read_csv(path)
    for rep in reports:
        mine = [r for r in rows if r["platform"] == rep.platform and r["mode"] == rep.mode]
        assert len(mine) == 4 * 3
        assert {r["stage"] for r in mine} == set(bench.BREAKDOWN)
        totals = [sum(r["micros"] for r in mine if r["run"] == i) / 1e3 for i in range(4)]
        assert statistics.stdev(totals) == pytest.approx(rep.stddev_ms, abs=0.01)
        assert statistics.fmean(totals) == pytest.approx(rep.mean_ms, abs=0.01)


def test_csv_schema_is_deterministic(reports, tmp_path):
    bench.write_csv(reports, tmp_path / "a.csv")
    bench.save_reports(reports, tmp_path / "r.json")
    bench.write_csv(bench.load_reports(tmp_path / "r.json"), tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_report_round_trip_and_plot_data(reports, tmp_path):
    bench.save_reports(reports, tmp_path / "r.json")
    back = bench.load_reports(tmp_path / "r.json")
    assert [r.to_dict() for r in back] == [r.to_dict() for r in reports]
    data = bench.plot_data(reports)
    assert data["schema"] == bench.CSV_SCHEMA_VERSION and len(data["series"]) == 4
    for series, rep in zip(data["series"], reports):
        assert series["total"]["mean_ms"] == rep.mean_ms
        assert set(series["stages"]) == set(bench.BREAKDOWN)
    text = bench.format_latency(reports[0])
    assert "compilations 4" in text and "orientation" in text


def test_registry_source(rig):
    client, fixtures = rig
    rep = bench.run_latency(client, fixtures, platform="A", mode="cold", runs=2, component_source="registry",
                            staple_collateral=False)
    assert {r.source for r in rep.runs} == {"registry"}
    assert fixtures.registry.total_hits >= 2


def test_unreachable_service():
    client = BenchClient("http://127.0.0.1:1")
    with pytest.raises(bench.ServiceUnreachable):
        client.counters()


def test_size_rows(scenario):
    for staple_collateral in (True, False):
        for staple_component in (True, False):
            rows = bench.run_size(scenario, staple_collateral=staple_collateral, staple_component=staple_component)
            assert [r.platform for r in rows] == ["A", "B"]
            for r in rows:
                assert r.json_ratio >= 1.25
                if not staple_component:
                    assert 0 < r.delta_bytes <= 512
                else:
                    assert r.delta_bytes > 100_000
    table = bench.format_size_table(rows)
    assert table.count("\n") == 2 and "json/cbor" in table


def test_single_run_stddev_is_zero():
    rep = LatencyReport("A", "warm", True, "staple", [RunRecord(0, 0.01, {}, "cache", 200)])
    assert rep.stddev_ms == 0.0 and rep.mean_ms == pytest.approx(10.0)


def test_concurrent_waves(rig):
    client, fixtures = rig
    rep = bench.run_latency(client, fixtures, platform="B", mode="warm", runs=9, concurrency=4)
    assert sorted(r.run for r in rep.runs) == list(range(9))
    assert rep.compilations == 1
    with pytest.raises(ValueError):
        bench.run_latency(client, fixtures, platform="B", mode="warm", runs=1, concurrency=0)


def test_stapled_collateral_beats_fetched():
    fixtures = BenchFixtures(delay_ms=100).start()
    try:
        with LocalService() as local:
            client = BenchClient(local.url, local.admin_token)
            fixtures.provision(client)
            means = {}
            for staple in (True, False):
                rep = bench.run_latency(client, fixtures, platform="A", mode="cold", runs=6,
                                        staple_collateral=staple)
                means[staple] = rep.mean_ms
            client.close()
    finally:
        fixtures.stop()
    assert fixtures.collateral.total_hits == 6
    assert means[True] < means[False]
