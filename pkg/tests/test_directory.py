import asyncio
import os
import threading

import pytest

from onionbox.directory import (ALL_ROLES, Directory, DirectoryServer, RelayDescriptor, Role, fetch_key,
                                fetch_snapshot, register)
from onionbox.errors import DirectoryError, NotFoundError, ValidationError

from conftest import run


def desc(roles=ALL_ROLES, address="127.0.0.1:9001", relay_id=None):
    return RelayDescriptor(relay_id or os.urandom(16), address, frozenset(roles), os.urandom(32))


def test_register_then_list():
    d = Directory()
    r1 = desc()
    d.register_relay(r1)
    assert d.list_relays().relays == (r1,)


def test_reregistration_replaces():
    d = Directory()
    r1 = desc()
    d.register_relay(r1)
    moved = RelayDescriptor(r1.relay_id, "127.0.0.1:9999", r1.roles, r1.public_key)
    d.register_relay(moved)
    (only,) = d.list_relays().relays
    assert only.address == "127.0.0.1:9999"


def test_empty_directory():
    assert Directory().list_relays().relays == ()


def test_role_filter():
    d = Directory()
    entry, exit_ = desc({Role.ENTRY}), desc({Role.EXIT})
    d.register_relay(entry)
    d.register_relay(exit_)
    assert d.list_relays({Role.EXIT}).relays == (exit_,)


@pytest.mark.parametrize("bad", [
    dict(relay_id=b"short"),
    dict(roles=frozenset()),
    dict(address="no-port"),
    dict(public_key=b"x"),
])
def test_validation(bad):
    base = dict(relay_id=os.urandom(16), address="127.0.0.1:1", roles=ALL_ROLES, public_key=os.urandom(32))
    base.update(bad)
    with pytest.raises(ValidationError):
        Directory().register_relay(RelayDescriptor(**base))


def test_unknown_key():
    with pytest.raises(NotFoundError):
        Directory().get_relay_key(os.urandom(16))


def test_key_fidelity():
    d = Directory()
    r = desc()
    d.register_relay(r)
    assert d.get_relay_key(r.relay_id) == r.public_key


def test_concurrent_threads_register():
    d = Directory()
    relays = [desc() for _ in range(50)]
    threads = [threading.Thread(target=d.register_relay, args=(r,)) for r in relays]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert set(d.list_relays().relays) == set(relays)


def test_snapshot_is_immutable():
    d = Directory()
    d.register_relay(desc())
    snap = d.list_relays()
    d.register_relay(desc())
    assert len(snap.relays) == 1
    with pytest.raises(AttributeError):
        snap.relays = ()


def test_wire_protocol_round_trip():
    async def scenario():
        server = await DirectoryServer().start()
        try:
            relays = [desc({Role.ENTRY, Role.MIDDLE}), desc({Role.EXIT})]
            await asyncio.gather(*(register(server.address, r) for r in relays))
            snap = await fetch_snapshot(server.address)
            exits = await fetch_snapshot(server.address, {Role.EXIT})
            key = await fetch_key(server.address, relays[1].relay_id)
            with pytest.raises(NotFoundError):
                await fetch_key(server.address, os.urandom(16))
            return relays, snap, exits, key, server.directory.get_relay_key(relays[1].relay_id)
        finally:
            await server.stop()

    relays, snap, exits, key, stored = run(scenario())
    assert {r.relay_id for r in snap.relays} == {r.relay_id for r in relays}
    assert [r.relay_id for r in exits.relays] == [relays[1].relay_id]
    assert key == stored == relays[1].public_key


def test_fifty_concurrent_wire_registrations():
    async def scenario():
        server = await DirectoryServer().start()
        try:
            relays = [desc(address=f"127.0.0.1:{10000 + i}") for i in range(50)]
            await asyncio.gather(*(register(server.address, r) for r in relays))
            return relays, await fetch_snapshot(server.address)
        finally:
            await server.stop()

    relays, snap = run(scenario())
    assert len(snap.relays) == 50
    assert {r.to_json()["relay_id"] for r in snap.relays} == {r.relay_id.hex() for r in relays}


def test_malformed_requests():
    async def scenario():
        server = await DirectoryServer().start()
        try:
            reader, writer = await asyncio.open_connection(server.host, server.port)
            out = []
            for line in (b"not json\n", b'{"op":"nope"}\n', b'{"op":"register","relay":{"relay_id":"zz"}}\n',
                         b'{"op":"get_key","relay_id":"00"}\n'):
                writer.write(line)
                out.append(await reader.readline())
            writer.close()
            with pytest.raises(ValidationError):
                await register(server.address, RelayDescriptor(b"x" * 16, "bad", ALL_ROLES, bytes(32)))
            return out
        finally:
            await server.stop()

    import json
    replies = [json.loads(x) for x in run(scenario())]
    assert [r["error"] for r in replies] == ["bad_request", "bad_op", "validation", "not_found"]


def test_unreachable_directory():
    with pytest.raises(DirectoryError):
        run(fetch_snapshot("127.0.0.1:1"))
