"""Layered authenticated encryption.

Every layer is AES-256-GCM over ``flag || body`` where ``flag`` says whether the
body is another ciphertext (FORWARD) or the final relay message (DELIVER).  The
nonce is the per-direction counter, so a layer only opens with the right key at
the right position in the stream.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
from dataclasses import dataclass, field
from typing import Sequence

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .cell import PAYLOAD_SIZE, RELAY_HEADER_SIZE
from .errors import ProtocolError, ReplayError, SizeError, UnwrapError

KEY_SIZE = 32
TAG_SIZE = 16
LAYER_OVERHEAD = 1 + TAG_SIZE
MAX_COUNTER = 2**64 - 1
MAX_PATH_LENGTH = 8

_SALT = b"onionbox/session/v1"


class LayerFlag(enum.IntEnum):
    FORWARD = 0
    DELIVER = 1


@dataclass(frozen=True)
class OnionLayer:
    flag: LayerFlag
    body: bytes


@dataclass(eq=False)
class SessionKey:
    """One hop's key pair plus the nonce counters for each direction.

    Each side of a hop owns its own instance: for the sender the counter is the
    next nonce to use, for the receiver it is the next nonce it will accept.
    """

    forward_key: bytes
    backward_key: bytes
    forward_counter: int = 0
    backward_counter: int = 0
    _fwd: AESGCM = field(init=False, repr=False)
    _bwd: AESGCM = field(init=False, repr=False)

    def __post_init__(self):
        if len(self.forward_key) != KEY_SIZE or len(self.backward_key) != KEY_SIZE:
            raise ValueError("session keys must be 32 octets")
        self._fwd = AESGCM(self.forward_key)
        self._bwd = AESGCM(self.backward_key)

    def fresh_copy(self) -> "SessionKey":
        """The same keys with both counters reset, i.e. the peer's view at setup."""
        return SessionKey(self.forward_key, self.backward_key)

    def same_keys(self, other: "SessionKey") -> bool:
        return self.forward_key == other.forward_key and self.backward_key == other.backward_key


def _nonce(counter: int) -> bytes:
    if counter > MAX_COUNTER:
        raise ReplayError("nonce counter exhausted")
    return counter.to_bytes(12, "big")


def max_layered_plaintext(n_layers: int) -> int:
    """Largest message that still fits a cell payload after ``n_layers`` layers."""
    return PAYLOAD_SIZE - n_layers * LAYER_OVERHEAD


def max_relay_data(n_layers: int) -> int:
    """Largest RelayMessage data field that survives ``n_layers`` layers."""
    return max_layered_plaintext(n_layers) - RELAY_HEADER_SIZE


def _open(cipher: AESGCM, counter: int, ciphertext: bytes) -> OnionLayer:
    try:
        plain = cipher.decrypt(_nonce(counter), ciphertext, None)
    except InvalidTag:
        raise UnwrapError("layer failed authentication") from None
    if not plain or plain[0] > 1:
        raise ProtocolError("bad layer flag")
    return OnionLayer(LayerFlag(plain[0]), plain[1:])


# -- forward direction (client -> exit) --------------------------------------

def onion_wrap(message: bytes, hop_keys: Sequence[SessionKey]) -> bytes:
    """Encrypt ``message`` for the last hop in ``hop_keys``, innermost layer first.

    The first key produces the outermost layer.  Each key's forward counter is
    consumed.
    """
    if not hop_keys:
        return message
    limit = max_layered_plaintext(len(hop_keys))
    if len(message) > limit:
        raise SizeError(f"{len(message)} octets exceed the {limit}-octet limit for {len(hop_keys)} layers")
    body, flag = message, LayerFlag.DELIVER
    for key in reversed(hop_keys):
        counter = key.forward_counter
        body = key._fwd.encrypt(_nonce(counter), bytes((flag,)) + body, None)
        key.forward_counter = counter + 1
        flag = LayerFlag.FORWARD
    return body


def unwrap_layer(ciphertext: bytes, key: SessionKey, counter: int | None = None) -> OnionLayer:
    """Remove one forward layer with this hop's key.

    ``counter`` may be passed to assert which nonce the caller believes is
    next; anything other than the expected value is rejected as a replay.
    """
    expected = key.forward_counter
    if counter is not None and counter != expected:
        raise ReplayError(f"forward counter {counter} presented, {expected} expected")
    layer = _open(key._fwd, expected, ciphertext)
    key.forward_counter = expected + 1
    return layer


# -- backward direction (exit -> client) --------------------------------------

def seal_backward(body: bytes, key: SessionKey, deliver: bool) -> bytes:
    """Add one backward layer at a relay.  ``deliver`` marks the originating hop."""
    if len(body) + LAYER_OVERHEAD > PAYLOAD_SIZE:
        raise SizeError("backward body no longer fits a cell")
    counter = key.backward_counter
    flag = LayerFlag.DELIVER if deliver else LayerFlag.FORWARD
    out = key._bwd.encrypt(_nonce(counter), bytes((flag,)) + body, None)
    key.backward_counter = counter + 1
    return out


def wrap_backward(message: bytes, hop_keys: Sequence[SessionKey], from_hop: int) -> bytes:
    """Layer a reply as it would be by hops ``from_hop`` .. 1 (1-based).

    Mirrors what the relays on the return path do one step at a time; used to
    build whole replies in-process.
    """
    if not 1 <= from_hop <= len(hop_keys):
        raise ValueError(f"from_hop {from_hop} outside 1..{len(hop_keys)}")
    body = seal_backward(message, hop_keys[from_hop - 1], deliver=True)
    for key in reversed(hop_keys[: from_hop - 1]):
        body = seal_backward(body, key, deliver=False)
    return body


def unwrap_backward(ciphertext: bytes, hop_keys: Sequence[SessionKey]) -> tuple[int, bytes]:
    """Strip backward layers entry-first; returns (originating hop, message)."""
    body = ciphertext
    for hop, key in enumerate(hop_keys, start=1):
        counter = key.backward_counter
        layer = _open(key._bwd, counter, body)
        key.backward_counter = counter + 1
        if layer.flag is LayerFlag.DELIVER:
            return hop, layer.body
        body = layer.body
    raise UnwrapError("reply carries more layers than the circuit has hops")


# -- key schedule --------------------------------------------------------------

def _expand(secret: bytes, salt: bytes, label: bytes) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=KEY_SIZE, salt=salt, info=label).derive(secret)


def derive_session_key(shared_secret: bytes, transcript: bytes) -> tuple[SessionKey, bytes]:
    """Derive the hop keys and a key-confirmation tag over ``transcript``."""
    salt = hashlib.sha256(_SALT + transcript).digest()
    forward = _expand(shared_secret, salt, b"fwd")
    backward = _expand(shared_secret, salt, b"bwd")
    confirm = _expand(shared_secret, salt, b"confirm")
    tag = hmac.new(confirm, transcript, hashlib.sha256).digest()
    return SessionKey(forward, backward), tag
