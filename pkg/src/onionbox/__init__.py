"""Desk-scale onion routing: directory, relays, circuit client and a SOCKS gateway."""

from .cell import CELL_SIZE, PAYLOAD_SIZE, Cell, Command, RelayCommand, RelayMessage, decode_cell, encode_cell
from .client import Circuit, CircuitManager, Stream, build_circuit, rotate_circuit, select_path
from .directory import Directory, DirectoryServer, DirectorySnapshot, RelayDescriptor, Role
from .gateway import CircuitPool, Gateway, GatewayConfig, Mode, circuit_pool_tick, serve_proxy
from .handshake import ClientHandshake, IdentityKey, server_handshake
from .onion import (LayerFlag, OnionLayer, SessionKey, derive_session_key, max_layered_plaintext, onion_wrap,
                    unwrap_backward, unwrap_layer, wrap_backward)
from .relay import Relay, RelayCircuitState

__version__ = "0.1.0"

__all__ = [
    "CELL_SIZE", "PAYLOAD_SIZE", "Cell", "Command", "RelayCommand", "RelayMessage", "decode_cell", "encode_cell",
    "Circuit", "CircuitManager", "Stream", "build_circuit", "rotate_circuit", "select_path",
    "Directory", "DirectoryServer", "DirectorySnapshot", "RelayDescriptor", "Role",
    "CircuitPool", "Gateway", "GatewayConfig", "Mode", "circuit_pool_tick", "serve_proxy",
    "ClientHandshake", "IdentityKey", "server_handshake",
    "LayerFlag", "OnionLayer", "SessionKey", "derive_session_key", "max_layered_plaintext", "onion_wrap",
    "unwrap_backward", "unwrap_layer", "wrap_backward", "Relay", "RelayCircuitState",
]
