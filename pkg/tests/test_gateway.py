import asyncio
import json
import os
import random
import struct

import pytest

from onionbox.gateway import BACKOFF_CAP, CircuitPool, GatewayConfig, Mode, circuit_pool_tick
from onionbox.harness import GatewaySpec, SocksError, socks_connect, socks_resolve
from onionbox.link import split_address

from conftest import run
from netutil import eventually, network, resolver_trap


def echo_port(net):
    return split_address(net.echo.address)[1]


async def raw_socks(gateway, greeting):
    host, port = split_address(gateway.address)
    reader, writer = await asyncio.open_connection(host, port)
    writer.write(greeting)
    return reader, writer


async def echo_through(proxy, host, port, payload):
    reader, writer = await socks_connect(proxy, host, port)
    try:
        writer.write(payload)
        return await asyncio.wait_for(reader.readexactly(len(payload)), 30)
    finally:
        writer.close()


def test_socks_connect_wire_bytes():
    async def body():
        async with network(3, gateways=[GatewaySpec()]) as net:
            reader, writer = await raw_socks(net.gateway, b"\x05\x01\x00")
            assert await reader.readexactly(2) == b"\x05\x00"
            name = b"echo.test"
            writer.write(b"\x05\x01\x00\x03" + bytes([len(name)]) + name + struct.pack(">H", echo_port(net)))
            reply = await reader.readexactly(10)
            assert reply[:4] == b"\x05\x00\x00\x01"
            writer.write(b"through the onion")
            assert await reader.readexactly(17) == b"through the onion"
            writer.close()

    run(body())


def test_no_acceptable_method():
    async def body():
        async with network(1, gateways=[GatewaySpec(path_length=1)]) as net:
            reader, writer = await raw_socks(net.gateway, b"\x05\x01\x02")
            assert await reader.readexactly(2) == b"\x05\xff"
            assert await reader.read() == b""
            writer.close()

    run(body())


@pytest.mark.parametrize("request_bytes, code", [
    (b"\x05\x02\x00\x01\x7f\x00\x00\x01\x00\x50", 0x07),   # BIND
    (b"\x04\x01\x00\x01\x7f\x00\x00\x01\x00\x50", 0x07),   # wrong version in request
    (b"\x05\x01\x00\x04" + bytes(16) + b"\x00\x50", 0x08),  # IPv6
])
def test_unsupported_requests(request_bytes, code):
    async def body():
        async with network(1, gateways=[GatewaySpec(path_length=1)]) as net:
            reader, writer = await raw_socks(net.gateway, b"\x05\x01\x00")
            assert await reader.readexactly(2) == b"\x05\x00"
            writer.write(request_bytes)
            reply = await reader.readexactly(10)
            assert reply[0] == 5 and reply[1] == code
            writer.close()

    run(body())


def test_wrong_greeting_version_is_refused():
    async def body():
        async with network(1, gateways=[GatewaySpec(path_length=1)]) as net:
            reader, writer = await raw_socks(net.gateway, b"\x04\x01\x00")
            reply = await reader.read()
            assert reply[1] == 0x07
            writer.close()

    run(body())


def test_socks_resolve_goes_to_the_exit():
    async def body():
        async with network(3, gateways=[GatewaySpec()]) as net:
            assert await socks_resolve(net.gateway.address, "example.test") == "10.0.0.9"
            with pytest.raises(SocksError) as info:
                await socks_resolve(net.gateway.address, "missing.invalid")
            assert info.value.code == 0x04
            assert net.trap.hits == []

    run(body())


def test_pool_rotates_after_lifetime():
    async def body():
        async with network(4) as net:
            pool = CircuitPool(net.directory.address, 3, lifetime=1.0, rng=random.Random(5))
            assert await circuit_pool_tick(pool) == ["built"]
            (old,) = pool.ready()
            assert await circuit_pool_tick(pool, old.created_at + 0.5) == []
            assert await circuit_pool_tick(pool, old.created_at + 2.0) == ["rotated"]
            (fresh,) = pool.ready()
            assert fresh is not old
            await eventually(lambda: old.closed)
            await pool.close()

    run(body())


def test_pool_keeps_circuit_when_directory_is_down():
    async def body():
        async with network(3) as net:
            pool = CircuitPool(net.directory.address, 3, lifetime=1.0)
            await pool.tick()
            (old,) = pool.ready()
            await net.directory.stop()
            assert await pool.tick(old.created_at + 5) == ["rotate-failed"]
            assert pool.ready() == [old] and pool.degraded
            assert pool.next_attempt == pytest.approx(old.created_at + 5 + 0.5)
            await pool.close()

    run(body())


def test_backoff_schedule():
    pool = CircuitPool("127.0.0.1:1", 3, 600)
    expected = [0.5, 1, 2, 4, 8, 16, BACKOFF_CAP, BACKOFF_CAP]
    got = []
    for failures in range(1, 9):
        pool.failures = failures
        got.append(pool.backoff())
    assert got == expected


def test_all_relays_down_answers_general_failure():
    async def body():
        async with network(3, gateways=[GatewaySpec()]) as net:
            for relay in net.relays:
                await relay.stop()
            await eventually(lambda: not net.gateway.pool.ready())
            with pytest.raises(SocksError) as info:
                await socks_connect(net.gateway.address, "echo.test", echo_port(net))
            assert info.value.code == 0x01
            assert "build-failed" in await net.gateway.pool.tick()
            assert net.gateway.pool.ready() == []

    run(body())


def test_hundred_connects_across_rotation():
    async def body():
        spec = GatewaySpec(circuit_lifetime=0.3)
        async with network(4, gateways=[spec]) as net:
            gw = net.gateway
            built_before = gw.pool.built
            for i in range(100):
                payload = f"request {i}".encode()
                assert await echo_through(gw.address, "echo.test", echo_port(net), payload) == payload
                await asyncio.sleep(0.005)
            assert gw.pool.built > built_before

    run(body(), timeout=60)


def test_onion_mode_never_resolves_locally(monkeypatch):
    async def body():
        async with network(3, gateways=[GatewaySpec()]) as net:
            with resolver_trap(monkeypatch) as seen:
                for _ in range(20):
                    assert await echo_through(net.gateway.address, "echo.test", echo_port(net), b"hi") == b"hi"
                    assert await socks_resolve(net.gateway.address, "example.test") == "10.0.0.9"
            assert seen == []
            assert net.trap.hits == []
            assert net.gateway.direct_connects == []

    run(body())


def test_leaky_mode_trips_the_trap_on_every_domain_connect():
    async def body():
        async with network(3, gateways=[GatewaySpec(leaky_mode=True)]) as net:
            for i in range(10):
                await echo_through(net.gateway.address, "echo.test", echo_port(net), b"x")
                assert len(net.trap.hits) >= i + 1
            assert all(hit.qname.rstrip(".") == "echo.test" for hit in net.trap.hits)

    run(body())


def test_direct_and_onion_deliver_identical_bytes():
    async def body():
        async with network(3, gateways=[GatewaySpec(), GatewaySpec(mode=Mode.DIRECT)]) as net:
            onion, direct = net.gateway_for(Mode.ONION), net.gateway_for(Mode.DIRECT)
            rng = random.Random(11)
            for size in [0, 1, 365, 366, 367, 4096, 200_000] + [rng.randrange(1, 50_000) for _ in range(5)]:
                payload = os.urandom(size) if size else b""
                for host in ("echo.test", "127.0.0.1"):
                    a = await echo_through(onion.address, host, echo_port(net), payload)
                    b = await echo_through(direct.address, host, echo_port(net), payload)
                    assert a == b == payload
            assert onion.direct_connects == []
            assert len(direct.direct_connects) == 24

    run(body(), timeout=60)


def test_config_file_with_overrides(tmp_path):
    path = tmp_path / "gw.json"
    path.write_text(json.dumps({"listen_addr": "127.0.0.1:9050", "directory_addr": "127.0.0.1:9030",
                                "path_length": 4, "mode": "onion", "unknown_key": 1}))
    cfg = GatewayConfig.from_file(path, path_length=2, leaky_mode=None)
    assert cfg.path_length == 2 and cfg.mode is Mode.ONION and cfg.leaky_mode is False
    assert cfg.circuit_lifetime == 600
    assert GatewayConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        GatewayConfig(mode=Mode.ONION)
    with pytest.raises(ValueError):
        GatewayConfig(directory_addr="127.0.0.1:1", path_length=0)
    assert GatewayConfig(mode="direct").mode is Mode.DIRECT
