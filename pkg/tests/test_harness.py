import csv
import json
import socket
import statistics
import time

import pytest

from onionbox.errors import HarnessError, SelectionError, SpawnError
from onionbox.gateway import GatewayConfig, Mode
from onionbox.harness import (Direction, GatewaySpec, RelaySpec, SpeedReport, TestnetSpec, ThroughputSample,
                              Verdict, emit_report, histogram, leak_test_for_config, run_dns_leak_test,
                              run_speed_test, spawn_testnet, text_histogram)
from onionbox.harness.speed import MiB
from onionbox.resolver import TrapResolver

from conftest import run
from netutil import free_port


def sample(mbps, mode=Mode.ONION, direction=Direction.DOWNLOAD):
    # 1 Mb over 1/mbps seconds
    return ThroughputSample(direction, mode, 125_000, 1 / mbps)


def test_report_arithmetic():
    report = SpeedReport([sample(1.0), sample(1.5), sample(2.0)])
    st = report.stats(Mode.ONION, Direction.DOWNLOAD)
    assert st["mean"] == pytest.approx(1.5)
    assert st["min"] == pytest.approx(1.0) and st["max"] == pytest.approx(2.0)
    assert st["histogram"] == {1.0: 1, 1.5: 1, 2.0: 1}


def test_sample_rate_definition():
    s = ThroughputSample(Direction.UPLOAD, Mode.DIRECT, 16 * MiB, 2.0)
    assert s.mbps == pytest.approx(16 * MiB * 8 / 2.0 / 1e6)


def test_overhead_ratio():
    report = SpeedReport([sample(2.0), sample(8.0, Mode.DIRECT), sample(10.0, Mode.DIRECT)])
    assert report.overhead_ratio(Direction.DOWNLOAD) == pytest.approx(4.5)
    with pytest.raises(LookupError):
        report.overhead_ratio(Direction.UPLOAD)


def test_emit_report_formats_agree(tmp_path):
    report = SpeedReport([sample(1.0), sample(1.5), sample(2.0)])
    paths = emit_report(report, tmp_path / "r", ("csv", "json", "txt"))
    assert [p.suffix for p in paths] == [".csv", ".json", ".txt"]
    with (tmp_path / "r.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["mode", "direction", "bytes", "elapsed", "mbps"]
    assert len(rows) == 4
    recomputed = statistics.fmean(int(r[2]) * 8 / float(r[3]) / 1e6 for r in rows[1:])
    summary = json.loads((tmp_path / "r.json").read_text())
    assert summary["groups"]["onion/download"]["mean"] == pytest.approx(recomputed, rel=1e-12)
    assert sum(summary["groups"]["onion/download"]["histogram"].values()) == 3
    assert "onion download" in (tmp_path / "r.txt").read_text()


def test_emit_report_unwritable_path(tmp_path):
    with pytest.raises(OSError):
        emit_report(SpeedReport([sample(1.0)]), tmp_path / "missing" / "r")


def test_histogram_conserves_counts():
    import random

    rng = random.Random(4)
    values = [rng.uniform(0.01, 40) for _ in range(1000)]
    hist = histogram(values)
    assert sum(hist.values()) == 1000
    assert all(edge % 0.5 == 0 for edge in hist)
    for v in values[:50]:
        edge = max(e for e in hist if e <= v)
        assert edge <= v < edge + 0.5
    assert text_histogram(SpeedReport([sample(v) for v in values])).count("\n") == len(hist) + 1


def test_boot_builds_three_hop_circuit_within_five_seconds():
    async def body():
        start = time.monotonic()
        net = await spawn_testnet(TestnetSpec(relays=3))
        try:
            elapsed = time.monotonic() - start
            (circuit,) = net.gateway.pool.ready()
            assert len(circuit.hops) == 3
            assert elapsed < 5.0
        finally:
            await net.close()

    run(body())


def test_too_few_relays_for_path_length():
    async def body():
        with pytest.raises(SelectionError):
            await spawn_testnet(TestnetSpec(relays=2, gateways=[GatewaySpec(path_length=3)]))

    run(body())


def test_repeated_spawn_teardown_frees_ports():
    ports = {name: free_port() for name in ("directory_port", "trap_port", "echo_port", "sink_port", "source_port")}
    relay_ports = [free_port() for _ in range(3)]
    gw_port = free_port()

    async def body():
        for _ in range(20):
            spec = TestnetSpec(relays=[RelaySpec(port=p) for p in relay_ports],
                               gateways=[GatewaySpec(port=gw_port)], **ports)
            net = await spawn_testnet(spec)
            await net.close()

    run(body(), timeout=60)
    # a leaked listener would still block a SO_REUSEADDR bind; TIME_WAIT leftovers do not
    tcp_ports = [p for k, p in ports.items() if k != "trap_port"] + relay_ports + [gw_port]
    for port in tcp_ports:
        with socket.socket() as s:
            s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            s.bind(("127.0.0.1", port))
            s.listen()
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as s:
        s.bind(("127.0.0.1", ports["trap_port"]))


def test_port_conflict_names_component():
    with socket.socket() as squatter:
        squatter.bind(("127.0.0.1", 0))
        squatter.listen()
        port = squatter.getsockname()[1]

        async def body():
            with pytest.raises(SpawnError, match="echo"):
                await spawn_testnet(TestnetSpec(echo_port=port))

        run(body())


def test_trap_bind_conflict_is_a_harness_error():
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as squatter:
        squatter.bind(("127.0.0.1", 0))
        port = squatter.getsockname()[1]

        async def body():
            with pytest.raises(HarnessError, match="trap"):
                await spawn_testnet(TestnetSpec(trap_port=port))
            with pytest.raises(HarnessError):
                await run_dns_leak_test(None, TrapResolver(), "127.0.0.1:1")

        run(body())


def test_measurement_honesty():
    async def body():
        spec = TestnetSpec(relays=3, gateways=[GatewaySpec(), GatewaySpec(mode=Mode.DIRECT)])
        net = await spawn_testnet(spec)
        try:
            reports = []
            for mode in Mode:
                for direction in Direction:
                    reports.append(await run_speed_test(net.gateway_for(mode), mode, direction, MiB, 5,
                                                        sink=net.sink.address, source=net.source.address))
            report = SpeedReport.merge(*reports)
            assert report.failures == 0 and len(report.samples) == 20
            uploaded = sum(s.bytes for s in report.samples if s.direction is Direction.UPLOAD)
            downloaded = sum(s.bytes for s in report.samples if s.direction is Direction.DOWNLOAD)
            assert net.sink.bytes_received == uploaded == 10 * MiB
            assert net.source.bytes_sent == downloaded == 10 * MiB
            assert all(s.mbps > 0 for s in report.samples)
            for direction in Direction:
                assert report.overhead_ratio(direction) > 1
        finally:
            await net.close()

    run(body(), timeout=120)


def test_speed_test_preconditions():
    async def body():
        with pytest.raises(ValueError):
            await run_speed_test("127.0.0.1:1", Mode.DIRECT, Direction.UPLOAD, MiB - 1, 5, sink="x:1", source="x:1")
        with pytest.raises(ValueError):
            await run_speed_test("127.0.0.1:1", Mode.DIRECT, Direction.UPLOAD, MiB, 4, sink="x:1", source="x:1")

    run(body())


def test_failed_transfers_are_counted_not_sampled():
    async def body():
        report = await run_speed_test(f"127.0.0.1:{free_port()}", Mode.DIRECT, Direction.DOWNLOAD, MiB, 5,
                                      sink="127.0.0.1:1", source="127.0.0.1:1")
        assert report.failures == 5 and report.samples == []

    run(body())


@pytest.mark.parametrize("mode, leaky, verdict", [
    (Mode.ONION, False, Verdict.NO_LEAK),
    (Mode.ONION, True, Verdict.LEAK),
    (Mode.DIRECT, False, Verdict.LEAK),
])
def test_leak_verdicts(mode, leaky, verdict):
    async def body():
        config = GatewayConfig(directory_addr="127.0.0.1:1", mode=mode, leaky_mode=leaky)
        report = await leak_test_for_config(config, connects=100, resolves=100)
        assert report.verdict is verdict
        assert report.connects == 100 and report.resolves == 100 and report.errors == 0
        if verdict is Verdict.LEAK:
            assert len(report.trap_hits) >= 100
        else:
            assert report.trap_hits == []
        assert report.summary()["verdict"] == verdict.value

    run(body(), timeout=120)


@pytest.mark.parametrize("position", [0, 1, 2])
def test_slowest_relay_caps_throughput_wherever_it_sits(position):
    from onionbox.directory import Role

    async def body():
        roles = [frozenset({Role.ENTRY}), frozenset({Role.MIDDLE}), frozenset({Role.EXIT})]
        relays = [RelaySpec(roles=r, rate_mbps=2.0 if i == position else None) for i, r in enumerate(roles)]
        net = await spawn_testnet(TestnetSpec(relays=relays))
        try:
            rates = []
            for direction in Direction:
                report = await run_speed_test(net.gateway, Mode.ONION, direction, 256 * 1024, 1,
                                              sink=net.sink.address, source=net.source.address,
                                              check_minimums=False)
                assert report.failures == 0
                rates.append(report.samples[0].mbps)
            return rates
        finally:
            await net.close()

    for rate in run(body(), timeout=60):
        assert rate <= 2.0 * 1.1
