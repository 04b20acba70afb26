import pytest

from onionbox.errors import HandshakeError
from onionbox.handshake import (CREATED_SIZE, SEALED_SIZE, ClientHandshake, IdentityKey, seal, server_handshake,
                                unseal)
from onionbox.onion import onion_wrap, unwrap_layer


def test_both_sides_agree_on_keys():
    relay = IdentityKey.generate()
    client = ClientHandshake(relay.public_bytes)
    payload = client.create_payload()
    assert len(payload) == SEALED_SIZE
    created, relay_key = server_handshake(payload, relay)
    assert len(created) == CREATED_SIZE
    client_key = client.complete(created)
    assert client_key.same_keys(relay_key)
    assert unwrap_layer(onion_wrap(b"hi", [client_key]), relay_key).body == b"hi"


def test_sealed_to_other_relay_is_rejected():
    right, wrong = IdentityKey.generate(), IdentityKey.generate()
    payload = ClientHandshake(right.public_bytes).create_payload()
    with pytest.raises(HandshakeError):
        server_handshake(payload, wrong)


def test_impostor_cannot_confirm():
    relay, impostor = IdentityKey.generate(), IdentityKey.generate()
    client = ClientHandshake(relay.public_bytes)
    # impostor answers with a well-formed CREATED but lacks relay's secret
    created, _ = server_handshake(ClientHandshake(impostor.public_bytes).create_payload(), impostor)
    with pytest.raises(HandshakeError):
        client.complete(created)


def test_tampered_created_fails_confirmation():
    relay = IdentityKey.generate()
    client = ClientHandshake(relay.public_bytes)
    created, _ = server_handshake(client.create_payload(), relay)
    bad = bytearray(created)
    bad[-1] ^= 0x80
    with pytest.raises(HandshakeError):
        client.complete(bytes(bad))


def test_seal_round_trip_and_tamper():
    key = IdentityKey.generate()
    blob = seal(b"material", key.public_bytes)
    assert unseal(blob, key) == b"material"
    bad = bytearray(blob)
    bad[40] ^= 1
    with pytest.raises(HandshakeError):
        unseal(bytes(bad), key)


def test_identity_file_round_trip(tmp_path):
    key = IdentityKey.generate()
    path = tmp_path / "k.hex"
    key.save(path)
    text = path.read_text().strip()
    assert len(bytes.fromhex(text)) == 64
    assert IdentityKey.load(path).public_bytes == key.public_bytes


def test_identity_file_mismatch_rejected():
    a, b = IdentityKey.generate(), IdentityKey.generate()
    with pytest.raises(ValueError):
        IdentityKey.from_hex((a.secret_bytes + b.public_bytes).hex())
