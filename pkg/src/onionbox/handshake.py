"""Relay identity keys and the one-round CREATE/CREATED handshake.

CREATE payload:  the client's ephemeral X25519 public key, sealed to the relay's
long-term key (``seal_pub || AES-GCM(ct)``).
CREATED payload: ``relay_ephemeral_pub || confirmation_tag``.

The shared secret is ``DH(x, Y) || DH(x, B)`` so only the holder of the relay's
long-term secret ``b`` can produce a valid confirmation tag.
"""

from __future__ import annotations

import hmac
from dataclasses import dataclass
from pathlib import Path

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .errors import HandshakeError
from .onion import SessionKey, derive_session_key

PUBLIC_KEY_SIZE = 32
SEALED_SIZE = 32 + 32 + 16
CREATED_SIZE = 32 + 32

_RAW = dict(encoding=serialization.Encoding.Raw, format=serialization.PublicFormat.Raw)
_ZERO_NONCE = bytes(12)


def _pub(private: X25519PrivateKey) -> bytes:
    return private.public_key().public_bytes(**_RAW)


def _dh(private: X25519PrivateKey, public: bytes) -> bytes:
    try:
        return private.exchange(X25519PublicKey.from_public_bytes(public))
    except ValueError as exc:
        raise HandshakeError(f"degenerate public key: {exc}") from None


@dataclass(frozen=True)
class IdentityKey:
    """A relay's long-term X25519 key pair."""

    private: X25519PrivateKey

    @classmethod
    def generate(cls) -> "IdentityKey":
        return cls(X25519PrivateKey.generate())

    @property
    def public_bytes(self) -> bytes:
        return _pub(self.private)

    @property
    def secret_bytes(self) -> bytes:
        return self.private.private_bytes(
            serialization.Encoding.Raw, serialization.PrivateFormat.Raw, serialization.NoEncryption()
        )

    def to_hex(self) -> str:
        return (self.secret_bytes + self.public_bytes).hex()

    @classmethod
    def from_hex(cls, text: str) -> "IdentityKey":
        raw = bytes.fromhex(text.strip())
        if len(raw) != 64:
            raise ValueError(f"identity file must hold 64 octets, found {len(raw)}")
        key = cls(X25519PrivateKey.from_private_bytes(raw[:32]))
        if key.public_bytes != raw[32:]:
            raise ValueError("public half does not match the secret half")
        return key

    def save(self, path) -> None:
        Path(path).write_text(self.to_hex() + "\n")

    @classmethod
    def load(cls, path) -> "IdentityKey":
        return cls.from_hex(Path(path).read_text())


def _seal_key(dh: bytes, seal_pub: bytes, recipient: bytes) -> AESGCM:
    key = HKDF(algorithm=hashes.SHA256(), length=32, salt=None, info=b"onionbox/seal" + seal_pub + recipient).derive(dh)
    return AESGCM(key)


def seal(payload: bytes, recipient_public: bytes) -> bytes:
    eph = X25519PrivateKey.generate()
    eph_pub = _pub(eph)
    cipher = _seal_key(_dh(eph, recipient_public), eph_pub, recipient_public)
    return eph_pub + cipher.encrypt(_ZERO_NONCE, payload, eph_pub)


def unseal(blob: bytes, identity: IdentityKey) -> bytes:
    if len(blob) < 32 + 16:
        raise HandshakeError("sealed blob too short")
    eph_pub, ct = blob[:32], blob[32:]
    cipher = _seal_key(_dh(identity.private, eph_pub), eph_pub, identity.public_bytes)
    try:
        return cipher.decrypt(_ZERO_NONCE, ct, eph_pub)
    except InvalidTag:
        raise HandshakeError("blob was not sealed to this relay") from None


class ClientHandshake:
    """Client half of a handshake with one relay."""

    def __init__(self, relay_public: bytes):
        self.relay_public = relay_public
        self._x = X25519PrivateKey.generate()
        self._x_pub = _pub(self._x)

    def create_payload(self) -> bytes:
        return seal(self._x_pub, self.relay_public)

    def complete(self, created: bytes) -> SessionKey:
        if len(created) != CREATED_SIZE:
            raise HandshakeError(f"CREATED payload is {len(created)} octets, expected {CREATED_SIZE}")
        y_pub, tag = created[:32], created[32:]
        secret = _dh(self._x, y_pub) + _dh(self._x, self.relay_public)
        session, expected = derive_session_key(secret, self.relay_public + self._x_pub + y_pub)
        if not hmac.compare_digest(tag, expected):
            raise HandshakeError("key confirmation failed")
        return session


def server_handshake(create_payload: bytes, identity: IdentityKey) -> tuple[bytes, SessionKey]:
    """Relay half: returns the CREATED payload and the relay's session key."""
    x_pub = unseal(create_payload, identity)
    if len(x_pub) != PUBLIC_KEY_SIZE:
        raise HandshakeError("sealed key material has the wrong size")
    y = X25519PrivateKey.generate()
    y_pub = _pub(y)
    secret = _dh(y, x_pub) + _dh(identity.private, x_pub)
    session, tag = derive_session_key(secret, identity.public_bytes + x_pub + y_pub)
    return y_pub + tag, session
