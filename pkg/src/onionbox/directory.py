"""The directory node: relay registry plus its newline-delimited JSON service.

Requests and responses are one JSON object per line::

    {"op": "register", "relay": {...descriptor...}}   -> {"ok": true}
    {"op": "list", "roles": ["exit"]}                 -> {"ok": true, "snapshot": {...}}
    {"op": "get_key", "relay_id": "<hex>"}            -> {"ok": true, "public_key": "<hex>"}

Failures come back as ``{"ok": false, "error": "<kind>", "detail": "..."}``.
Binary fields travel as lowercase hex.
"""

from __future__ import annotations

import asyncio
import enum
import json
import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .errors import DirectoryError, NotFoundError, ValidationError
from .link import join_address, split_address

log = logging.getLogger(__name__)


class Role(str, enum.Enum):
    ENTRY = "entry"
    MIDDLE = "middle"
    EXIT = "exit"


ALL_ROLES = frozenset(Role)


def parse_roles(value: Iterable[str] | str) -> frozenset[Role]:
    if isinstance(value, str):
        value = [v for v in value.split(",") if v.strip()]
    try:
        return frozenset(Role(v.strip().lower()) for v in value)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None


@dataclass(frozen=True)
class RelayDescriptor:
    relay_id: bytes
    address: str
    roles: frozenset[Role]
    public_key: bytes
    registered_at: float = field(default_factory=time.time)

    def validate(self) -> None:
        if not isinstance(self.relay_id, bytes) or len(self.relay_id) != 16:
            raise ValidationError("relay_id must be 16 octets")
        if not isinstance(self.public_key, bytes) or len(self.public_key) != 32:
            raise ValidationError("public_key must be 32 octets")
        if not self.roles:
            raise ValidationError("roles must not be empty")
        try:
            split_address(self.address)
        except ValueError as exc:
            raise ValidationError(str(exc)) from None

    def to_json(self) -> dict:
        return {
            "relay_id": self.relay_id.hex(),
            "address": self.address,
            "roles": sorted(r.value for r in self.roles),
            "public_key": self.public_key.hex(),
            "registered_at": self.registered_at,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RelayDescriptor":
        try:
            desc = cls(
                relay_id=bytes.fromhex(obj["relay_id"]),
                address=str(obj["address"]),
                roles=parse_roles(obj["roles"]),
                public_key=bytes.fromhex(obj["public_key"]),
                registered_at=float(obj.get("registered_at", time.time())),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed descriptor: {exc}") from None
        desc.validate()
        return desc


@dataclass(frozen=True)
class DirectorySnapshot:
    relays: tuple[RelayDescriptor, ...]
    issued_at: float

    def __len__(self):
        return len(self.relays)

    def by_id(self, relay_id: bytes) -> RelayDescriptor:
        for r in self.relays:
            if r.relay_id == relay_id:
                return r
        raise NotFoundError(relay_id.hex())

    def to_json(self) -> dict:
        return {"issued_at": self.issued_at, "relays": [r.to_json() for r in self.relays]}

    @classmethod
    def from_json(cls, obj: dict) -> "DirectorySnapshot":
        return cls(tuple(RelayDescriptor.from_json(r) for r in obj["relays"]), float(obj["issued_at"]))


class Directory:
    """Thread-safe relay registry."""

    def __init__(self):
        self._lock = threading.Lock()
        self._relays: dict[bytes, RelayDescriptor] = {}

    def register_relay(self, descriptor: RelayDescriptor) -> bool:
        descriptor.validate()
        with self._lock:
            self._relays[descriptor.relay_id] = descriptor
        return True

    def list_relays(self, role_filter: Optional[Iterable[Role]] = None) -> DirectorySnapshot:
        wanted = frozenset(role_filter) if role_filter else None
        with self._lock:
            relays = tuple(self._relays.values())
        if wanted:
            relays = tuple(r for r in relays if r.roles & wanted)
        return DirectorySnapshot(relays, time.time())

    def get_relay_key(self, relay_id: bytes) -> bytes:
        with self._lock:
            desc = self._relays.get(relay_id)
        if desc is None:
            raise NotFoundError(f"unknown relay {relay_id.hex()}")
        return desc.public_key

    def __len__(self):
        with self._lock:
            return len(self._relays)


class DirectoryServer:
    def __init__(self, directory: Optional[Directory] = None, host: str = "127.0.0.1", port: int = 0):
        self.directory = directory or Directory()
        self.host = host
        self.port = port
        self._server: asyncio.AbstractServer | None = None
        self._conns: set[asyncio.StreamWriter] = set()

    @property
    def address(self) -> str:
        return join_address(self.host, self.port)

    async def start(self) -> "DirectoryServer":
        self._server = await asyncio.start_server(self._serve, self.host, self.port)
        self.port = self._server.sockets[0].getsockname()[1]
        log.info("directory listening on %s", self.address)
        return self

    async def stop(self) -> None:
        if self._server is not None:
            self._server.close()
            for w in list(self._conns):
                w.close()
            await self._server.wait_closed()
            self._server = None

    def handle(self, request: dict) -> dict:
        op = request.get("op")
        try:
            if op == "register":
                self.directory.register_relay(RelayDescriptor.from_json(request.get("relay") or {}))
                return {"ok": True}
            if op == "list":
                roles = parse_roles(request["roles"]) if request.get("roles") else None
                return {"ok": True, "snapshot": self.directory.list_relays(roles).to_json()}
            if op == "get_key":
                key = self.directory.get_relay_key(bytes.fromhex(request.get("relay_id", "")))
                return {"ok": True, "public_key": key.hex()}
        except ValidationError as exc:
            return {"ok": False, "error": "validation", "detail": str(exc)}
        except NotFoundError as exc:
            return {"ok": False, "error": "not_found", "detail": str(exc)}
        except ValueError as exc:
            return {"ok": False, "error": "validation", "detail": str(exc)}
        return {"ok": False, "error": "bad_op", "detail": f"unknown op {op!r}"}

    async def _serve(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        self._conns.add(writer)
        try:
            while line := await reader.readline():
                try:
                    request = json.loads(line)
                    if not isinstance(request, dict):
                        raise ValueError("request must be an object")
                except ValueError as exc:
                    response = {"ok": False, "error": "bad_request", "detail": str(exc)}
                else:
                    response = self.handle(request)
                writer.write(json.dumps(response).encode() + b"\n")
                await writer.drain()
        except ConnectionError:
            pass
        finally:
            self._conns.discard(writer)
            writer.close()


async def _call(address: str, request: dict, timeout: float = 5.0) -> dict:
    host, port = split_address(address)
    try:
        reader, writer = await asyncio.wait_for(asyncio.open_connection(host, port), timeout)
    except (OSError, asyncio.TimeoutError) as exc:
        raise DirectoryError(f"directory {address} unreachable: {exc}") from None
    try:
        writer.write(json.dumps(request).encode() + b"\n")
        await writer.drain()
        line = await asyncio.wait_for(reader.readline(), timeout)
    except (OSError, asyncio.TimeoutError) as exc:
        raise DirectoryError(f"directory {address} failed: {exc}") from None
    finally:
        writer.close()
    if not line:
        raise DirectoryError("directory closed the connection")
    response = json.loads(line)
    if not response.get("ok"):
        kind, detail = response.get("error"), response.get("detail", "")
        if kind == "not_found":
            raise NotFoundError(detail)
        if kind == "validation":
            raise ValidationError(detail)
        raise DirectoryError(f"{kind}: {detail}")
    return response


async def register(address: str, descriptor: RelayDescriptor) -> None:
    await _call(address, {"op": "register", "relay": descriptor.to_json()})


async def fetch_snapshot(address: str, roles: Optional[Iterable[Role]] = None) -> DirectorySnapshot:
    request = {"op": "list"}
    if roles:
        request["roles"] = sorted(r.value for r in roles)
    response = await _call(address, request)
    return DirectorySnapshot.from_json(response["snapshot"])


async def fetch_key(address: str, relay_id: bytes) -> bytes:
    response = await _call(address, {"op": "get_key", "relay_id": relay_id.hex()})
    return bytes.fromhex(response["public_key"])
