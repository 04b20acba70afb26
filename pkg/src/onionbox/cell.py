"""Fixed-size cell framing and the relay message carried inside onion layers.

Wire layout of a cell (512 octets)::

    0..4    circuit_id   big-endian u32
    4       command      CREATE=1 CREATED=2 RELAY=3 DESTROY=4
    5..7    payload_len  big-endian u16
    7..512  payload      payload_len content octets, then random padding
"""

from __future__ import annotations

import enum
import os
import struct
from dataclasses import dataclass

from .errors import FramingError, ProtocolError, SizeError

CELL_SIZE = 512
HEADER_SIZE = 7
PAYLOAD_SIZE = CELL_SIZE - HEADER_SIZE  # 505

_HEADER = struct.Struct(">IBH")
_RELAY_HEADER = struct.Struct(">HB")
RELAY_HEADER_SIZE = _RELAY_HEADER.size  # 3


class Command(enum.IntEnum):
    CREATE = 1
    CREATED = 2
    RELAY = 3
    DESTROY = 4


class RelayCommand(enum.IntEnum):
    BEGIN = 1
    DATA = 2
    END = 3
    EXTEND = 4
    EXTENDED = 5
    RESOLVE = 6
    RESOLVED = 7
    CONNECTED = 8


CIRCUIT_LEVEL = frozenset({RelayCommand.EXTEND, RelayCommand.EXTENDED})


@dataclass(frozen=True)
class Cell:
    circuit_id: int
    command: Command
    payload: bytes = b""

    @property
    def payload_len(self) -> int:
        return len(self.payload)


def encode_cell(cell: Cell) -> bytes:
    n = len(cell.payload)
    if n > PAYLOAD_SIZE:
        raise SizeError(f"cell payload of {n} octets exceeds {PAYLOAD_SIZE}")
    if not 0 <= cell.circuit_id <= 0xFFFFFFFF:
        raise SizeError(f"circuit id {cell.circuit_id} does not fit in 32 bits")
    return _HEADER.pack(cell.circuit_id, cell.command, n) + cell.payload + os.urandom(PAYLOAD_SIZE - n)


def decode_cell(raw: bytes) -> Cell:
    if len(raw) != CELL_SIZE:
        raise FramingError(f"expected {CELL_SIZE} octets, got {len(raw)}")
    circuit_id, command, n = _HEADER.unpack_from(raw)
    try:
        command = Command(command)
    except ValueError:
        raise ProtocolError(f"unknown cell command {command}") from None
    if n > PAYLOAD_SIZE:
        raise FramingError(f"payload_len {n} exceeds {PAYLOAD_SIZE}")
    return Cell(circuit_id, command, bytes(raw[HEADER_SIZE:HEADER_SIZE + n]))


@dataclass(frozen=True)
class RelayMessage:
    stream_id: int
    relay_cmd: RelayCommand
    data: bytes = b""

    def __post_init__(self):
        if self.relay_cmd in CIRCUIT_LEVEL:
            if self.stream_id != 0:
                raise ProtocolError(f"{self.relay_cmd.name} must use stream 0")
        elif not 0 < self.stream_id <= 0xFFFF:
            raise ProtocolError(f"{self.relay_cmd.name} needs a stream id in 1..65535")

    def encode(self) -> bytes:
        return _RELAY_HEADER.pack(self.stream_id, self.relay_cmd) + self.data

    @classmethod
    def decode(cls, raw: bytes) -> "RelayMessage":
        if len(raw) < RELAY_HEADER_SIZE:
            raise ProtocolError("truncated relay message")
        stream_id, cmd = _RELAY_HEADER.unpack_from(raw)
        try:
            cmd = RelayCommand(cmd)
        except ValueError:
            raise ProtocolError(f"unknown relay command {cmd}") from None
        return cls(stream_id, cmd, bytes(raw[RELAY_HEADER_SIZE:]))
