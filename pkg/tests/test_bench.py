import csv

import pytest
from hypothesis import given
from hypothesis import strategies as st

from otachain.bench import (DEFAULT_ORIGINS, DEFAULT_PEERS, LatencyRow, LatencyScenario,
                            ReportError, RpcModel, crossover_indices, default_scenarios,
                            emit_report, run_latency_bench, run_ledger_timing)
from otachain.castore import PeerEndpoint, load_latency_config
from otachain.ledger import ChainConfig


@pytest.mark.parametrize("interval", [0.5, 1, 15, 60])
def test_timing_ordering(interval):
    r = run_ledger_timing(ChainConfig(interval))
    assert r.ordering_holds()
    assert r.deploy_delay > r.confirm_delay
    assert interval <= r.confirm_delay <= 2 * interval + 1
    assert r.call_submit_delay == pytest.approx(RpcModel().round_trip)


@given(st.floats(0.05, 120), st.integers(1, 3))
def test_timing_ordering_any_interval(interval, depth):
    assert run_ledger_timing(ChainConfig(interval, depth)).ordering_holds()


def test_deeper_confirmation_costs_more():
    shallow = run_ledger_timing(ChainConfig(15, 1))
    deep = run_ledger_timing(ChainConfig(15, 3))
    assert deep.confirm_delay == pytest.approx(shallow.confirm_delay + 30)


def test_default_latency_crossover():
    rows = run_latency_bench(default_scenarios())
    assert crossover_indices(rows) == [2]
    assert rows[0].direct_ms <= rows[0].content_ms


def test_shipped_config_matches_defaults():
    origins, peers = load_latency_config("configs/latency_endpoints.conf")
    assert tuple(origins) == DEFAULT_ORIGINS and tuple(peers) == DEFAULT_PEERS


def test_growing_origin_distance_eventually_crosses():
    peer = PeerEndpoint("p", 30, 1e7)
    scen = [LatencyScenario(PeerEndpoint(f"o{i}", d, 1e7), (peer,), 300_000)
            for i, d in enumerate([1, 10, 100, 1000, 10000])]
    rows = run_latency_bench(scen, chunk_size=65536)
    assert len(crossover_indices(rows)) == 1
    assert rows[-1].content_ms < rows[-1].direct_ms


def test_scenario_validation():
    with pytest.raises(ValueError):
        LatencyScenario(DEFAULT_ORIGINS[0], (), 10)
    with pytest.raises(ValueError):
        LatencyScenario(DEFAULT_ORIGINS[0], DEFAULT_PEERS, 0)


def test_report_files(tmp_path):
    rows = [LatencyRow("a", 10, 1.0, 2.0), LatencyRow("b", 10, 3.0, 2.5)]
    csv_path, dat_path = emit_report(rows, tmp_path / "out")
    got = list(csv.DictReader(csv_path.open()))
    assert list(got[0]) == ["scenario", "payload_bytes", "direct_ms", "content_ms"]
    assert got[1] == {"scenario": "b", "payload_bytes": "10", "direct_ms": "3.000",
                      "content_ms": "2.500"}
    assert dat_path.read_text().splitlines()[1] == "0 a 1.000 2.000"
    with pytest.raises(ReportError):
        emit_report([], tmp_path)
