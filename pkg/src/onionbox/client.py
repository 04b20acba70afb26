"""Originator side: choosing a path, telescoping a circuit, and streams over it."""

from __future__ import annotations

import asyncio
import itertools
import logging
import random
import time
from typing import Optional, Sequence

from . import directory as dirclient
from .cell import Cell, Command, RelayCommand, RelayMessage
from .directory import DirectorySnapshot, RelayDescriptor, Role
from .errors import (CircuitBuildError, CircuitClosedError, HandshakeError, OnionError, ProtocolError,
                     ResolutionError, SelectionError, StreamOpenError, UnwrapError)
from .handshake import ClientHandshake
from .link import Link
from .onion import MAX_PATH_LENGTH, SessionKey, max_relay_data, onion_wrap, unwrap_backward
from .relay import RESOLVED_OK, EndReason, encode_extend

log = logging.getLogger(__name__)

DEFAULT_PATH_LENGTH = 3
HANDSHAKE_TIMEOUT = 5.0
CONNECT_TIMEOUT = 10.0
STREAM_WINDOW = 64

_REJECTION_ATTEMPTS = 10_000


# -- path selection ---------------------------------------------------------

def _position_pools(relays: Sequence[RelayDescriptor], n: int) -> list[list[RelayDescriptor]]:
    def capable(*roles):
        return [r for r in relays if all(role in r.roles for role in roles)]

    if n == 1:
        return [capable(Role.ENTRY, Role.EXIT)]
    return [capable(Role.ENTRY)] + [capable(Role.MIDDLE)] * (n - 2) + [capable(Role.EXIT)]


def _has_valid_path(pools, used=frozenset()) -> bool:
    if not pools:
        return True
    return any(_has_valid_path(pools[1:], used | {r.relay_id})
               for r in pools[0] if r.relay_id not in used)


def select_path(snapshot: DirectorySnapshot, n: int = DEFAULT_PATH_LENGTH,
                rng: Optional[random.Random] = None) -> list[RelayDescriptor]:
    """Pick ``n`` distinct relays, uniformly over all role-valid paths.

    Each position is drawn independently from its role pool and the draw is
    rejected if a relay repeats; conditioning on distinctness leaves every valid
    path equally likely.
    """
    if not 1 <= n <= MAX_PATH_LENGTH:
        raise SelectionError(f"path length must be in 1..{MAX_PATH_LENGTH}")
    rng = rng or random.SystemRandom()
    relays = sorted(snapshot.relays, key=lambda r: r.relay_id)
    pools = _position_pools(relays, n)
    if any(not p for p in pools) or len(relays) < n or not _has_valid_path(pools):
        raise SelectionError(f"{len(relays)} relays cannot form a valid {n}-hop path")
    for _ in range(_REJECTION_ATTEMPTS):
        path = [rng.choice(pool) for pool in pools]
        if len({r.relay_id for r in path}) == n:
            return path
    # pathological pools: enumerate and pick exactly
    valid = [list(p) for p in itertools.product(*pools) if len({r.relay_id for r in p}) == n]
    return rng.choice(valid)


# -- streams ----------------------------------------------------------------

class Stream:
    """Ordered byte duplex carried by DATA messages on one circuit."""

    def __init__(self, circuit: "Circuit", stream_id: int, destination: str):
        self.circuit = circuit
        self.stream_id = stream_id
        self.destination = destination
        self.end_reason: Optional[int] = None
        self._inbox: asyncio.Queue = asyncio.Queue(maxsize=STREAM_WINDOW)
        self._pending = b""
        self._eof = False
        self._closed = False
        self._opened = asyncio.get_running_loop().create_future()

    def __repr__(self):
        return f"<Stream {self.stream_id} -> {self.destination}>"

    @property
    def closed(self) -> bool:
        return self._closed

    async def write(self, data: bytes) -> None:
        if self._closed or self.end_reason is not None:
            raise CircuitClosedError(f"stream {self.stream_id} is closed")
        chunk = self.circuit.max_data
        view = memoryview(data)
        for off in range(0, len(view), chunk):
            await self.circuit.send_message(RelayMessage(self.stream_id, RelayCommand.DATA, bytes(view[off:off + chunk])))

    async def read(self, n: int = -1) -> bytes:
        """Return up to ``n`` bytes (everything buffered if ``n`` < 0); b"" at EOF."""
        if not self._pending:
            if self._eof:
                return b""
            item = await self._inbox.get()
            if item is None:
                self._eof = True
                return b""
            self._pending = item
        if n < 0 or n >= len(self._pending):
            data, self._pending = self._pending, b""
        else:
            data, self._pending = self._pending[:n], self._pending[n:]
        return data

    async def readexactly(self, n: int) -> bytes:
        parts, got = [], 0
        while got < n:
            part = await self.read(n - got)
            if not part:
                raise asyncio.IncompleteReadError(b"".join(parts), n)
            parts.append(part)
            got += len(part)
        return b"".join(parts)

    async def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        if self.end_reason is None and not self.circuit.closed:
            try:
                await self.circuit.send_message(RelayMessage(self.stream_id, RelayCommand.END, bytes((EndReason.DONE,))))
            except OnionError:
                pass
        self.circuit._forget(self)

    # called by the circuit
    async def _feed(self, data: bytes) -> None:
        if not self._closed:
            await self._inbox.put(data)

    def _set_end(self, reason: int) -> None:
        if self.end_reason is None:
            self.end_reason = reason
        if not self._opened.done():
            self._opened.set_exception(StreamOpenError(reason))
            self._opened.exception()

    async def _finish(self, reason: int) -> None:
        self._set_end(reason)
        if not self._closed:
            await self._inbox.put(None)

    def _abort(self, reason: int) -> None:
        """Circuit is gone: buffered data is discarded and readers see EOF."""
        self._set_end(reason)
        while self._inbox.full():
            self._inbox.get_nowait()
        self._inbox.put_nowait(None)


# -- circuits ---------------------------------------------------------------

class Circuit:
    """Client record of an established chain: hops, their keys, and streams."""

    def __init__(self, link: Link, circuit_id: int):
        self.link = link
        self.circuit_id = circuit_id
        self.hops: list[tuple[RelayDescriptor, SessionKey]] = []
        self.streams: dict[int, Stream] = {}
        self.created_at = time.monotonic()
        self.closed = False
        self.destroy_received = False
        self._next_stream = 1
        self._waiter: Optional[asyncio.Future] = None
        self._resolves: dict[int, asyncio.Future] = {}
        self._drain_then_close = False

    def __repr__(self):
        names = ",".join(d.address for d, _ in self.hops)
        return f"<Circuit {self.circuit_id:#x} [{names}]{' closed' if self.closed else ''}>"

    @property
    def keys(self) -> list[SessionKey]:
        return [k for _, k in self.hops]

    @property
    def path(self) -> list[RelayDescriptor]:
        return [d for d, _ in self.hops]

    @property
    def max_data(self) -> int:
        return max_relay_data(len(self.hops))

    @property
    def age(self) -> float:
        return time.monotonic() - self.created_at

    # -- sending --

    async def send_message(self, msg: RelayMessage, hop: Optional[int] = None) -> None:
        if self.closed:
            raise CircuitClosedError("circuit is closed")
        keys = self.keys if hop is None else self.keys[:hop]
        await self.link.send(Cell(self.circuit_id, Command.RELAY, onion_wrap(msg.encode(), keys)))

    async def _expect(self, send, timeout: float):
        loop = asyncio.get_running_loop()
        self._waiter = fut = loop.create_future()
        try:
            await send
            return await asyncio.wait_for(fut, timeout)
        finally:
            self._waiter = None

    # -- receiving --

    async def _on_cell(self, link: Link, cell: Cell) -> None:
        if cell.circuit_id != self.circuit_id or self.closed:
            return
        if cell.command is Command.RELAY:
            try:
                hop, body = unwrap_backward(cell.payload, self.keys)
                msg = RelayMessage.decode(body)
            except (UnwrapError, ProtocolError) as exc:
                log.warning("%r: bad reply (%s); tearing down", self, exc)
                await self.destroy()
                return
            await self._dispatch(hop, msg)
        elif cell.command is Command.CREATED:
            if self._waiter is not None and not self._waiter.done():
                self._waiter.set_result(cell.payload)
        elif cell.command is Command.DESTROY:
            self.destroy_received = True
            self._mark_closed()

    async def _dispatch(self, hop: int, msg: RelayMessage) -> None:
        cmd = msg.relay_cmd
        if cmd is RelayCommand.EXTENDED:
            if self._waiter is not None and not self._waiter.done():
                self._waiter.set_result((hop, msg.data))
            return
        if cmd is RelayCommand.RESOLVED:
            fut = self._resolves.pop(msg.stream_id, None)
            if fut is not None and not fut.done():
                fut.set_result(msg.data)
            return
        stream = self.streams.get(msg.stream_id)
        if stream is None:
            return
        if cmd is RelayCommand.DATA:
            await stream._feed(msg.data)
        elif cmd is RelayCommand.CONNECTED:
            if not stream._opened.done():
                stream._opened.set_result(msg.data)
        elif cmd is RelayCommand.END:
            self._forget(stream)
            await stream._finish(msg.data[0] if msg.data else EndReason.MISC)

    def _on_link_closed(self, link: Link) -> None:
        self._mark_closed()

    def _mark_closed(self) -> None:
        if self.closed:
            return
        self.closed = True
        if self._waiter is not None and not self._waiter.done():
            self._waiter.set_exception(CircuitClosedError("circuit destroyed"))
        for fut in self._resolves.values():
            if not fut.done():
                fut.set_exception(CircuitClosedError("circuit destroyed"))
        self._resolves.clear()
        for stream in list(self.streams.values()):
            stream._abort(EndReason.DESTROYED)
        self.streams.clear()
        self.link.close()

    async def destroy(self) -> None:
        if not self.closed:
            await self.link.send(Cell(self.circuit_id, Command.DESTROY))
        self._mark_closed()

    def _forget(self, stream: Stream) -> None:
        if self.streams.get(stream.stream_id) is stream:
            del self.streams[stream.stream_id]
        if self._drain_then_close and not self.streams:
            asyncio.get_running_loop().create_task(self.destroy())

    def close_when_idle(self) -> None:
        """Destroy now if no streams are open, otherwise after the last one ends."""
        self._drain_then_close = True
        if not self.streams:
            asyncio.get_running_loop().create_task(self.destroy())

    # -- streams --

    def _allocate_stream_id(self) -> int:
        for _ in range(0xFFFF):
            sid = self._next_stream
            self._next_stream = sid % 0xFFFF + 1
            if sid not in self.streams and sid not in self._resolves:
                return sid
        raise OnionError("stream ids exhausted")

    async def open_stream(self, destination: str, timeout: float = CONNECT_TIMEOUT) -> Stream:
        if self.closed:
            raise CircuitClosedError("circuit is closed")
        if not destination:
            raise ValueError("destination must be host:port")
        stream = Stream(self, self._allocate_stream_id(), destination)
        self.streams[stream.stream_id] = stream
        try:
            await self.send_message(RelayMessage(stream.stream_id, RelayCommand.BEGIN, destination.encode()))
            await asyncio.wait_for(asyncio.shield(stream._opened), timeout)
        except asyncio.TimeoutError:
            await stream.close()
            raise StreamOpenError(EndReason.TIMEOUT, f"no CONNECTED from exit within {timeout} s") from None
        except BaseException:
            self._forget(stream)
            raise
        return stream

    async def resolve(self, hostname: str, timeout: float = CONNECT_TIMEOUT) -> str:
        if self.closed:
            raise CircuitClosedError("circuit is closed")
        sid = self._allocate_stream_id()
        fut = asyncio.get_running_loop().create_future()
        self._resolves[sid] = fut
        try:
            await self.send_message(RelayMessage(sid, RelayCommand.RESOLVE, hostname.encode()))
            data = await asyncio.wait_for(fut, timeout)
        finally:
            self._resolves.pop(sid, None)
        if len(data) != 5 or data[0] != RESOLVED_OK:
            raise ResolutionError(hostname, data[0] if data else 0xFF)
        return ".".join(str(b) for b in data[1:])


async def build_circuit(path: Sequence[RelayDescriptor], timeout: float = HANDSHAKE_TIMEOUT) -> Circuit:
    """Telescope a circuit through ``path``: CREATE to hop 1, then EXTEND hop by hop."""
    if not path:
        raise SelectionError("empty path")
    if len({d.relay_id for d in path}) != len(path):
        raise SelectionError("path repeats a relay")
    try:
        link = await Link.connect(path[0].address, timeout)
    except (OSError, asyncio.TimeoutError) as exc:
        raise CircuitBuildError(1, f"entry unreachable: {exc}") from None
    circuit = Circuit(link, random.getrandbits(32) or 1)
    link.start(circuit._on_cell, circuit._on_link_closed)
    hop = 1
    try:
        hs = ClientHandshake(path[0].public_key)
        created = await circuit._expect(link.send(Cell(circuit.circuit_id, Command.CREATE, hs.create_payload())), timeout)
        circuit.hops.append((path[0], hs.complete(created)))
        for hop, desc in enumerate(path[1:], start=2):
            hs = ClientHandshake(desc.public_key)
            extend = RelayMessage(0, RelayCommand.EXTEND, encode_extend(desc.address, hs.create_payload()))
            from_hop, data = await circuit._expect(circuit.send_message(extend), timeout)
            if from_hop != hop - 1:
                raise HandshakeError(f"EXTENDED came from hop {from_hop}")
            if not data:
                raise HandshakeError(f"hop {hop - 1} could not reach {desc.address}")
            circuit.hops.append((desc, hs.complete(data)))
    except (HandshakeError, CircuitClosedError, asyncio.TimeoutError, OnionError) as exc:
        reason = str(exc) or type(exc).__name__
        await circuit.destroy()
        raise CircuitBuildError(hop, reason) from None
    return circuit


class CircuitManager:
    """Owns the live circuit for a client and replaces it on demand."""

    def __init__(self, directory_addr: str, path_length: int = DEFAULT_PATH_LENGTH,
                 rng: Optional[random.Random] = None):
        self.directory_addr = directory_addr
        self.path_length = path_length
        self.rng = rng or random.SystemRandom()
        self.current: Optional[Circuit] = None
        self.retired: list[Circuit] = []

    async def build(self) -> Circuit:
        snapshot = await dirclient.fetch_snapshot(self.directory_addr)
        path = select_path(snapshot, self.path_length, self.rng)
        return await build_circuit(path)

    async def get(self) -> Circuit:
        if self.current is None or self.current.closed:
            self.current = await self.build()
        return self.current

    async def rotate(self) -> Circuit:
        """Swap in a freshly built circuit; the old one closes once its streams end.

        If the build fails the old circuit stays in service and the error propagates.
        """
        fresh = await self.build()
        old, self.current = self.current, fresh
        if old is not None and not old.closed:
            old.close_when_idle()
            self.retired.append(old)
        return fresh

    async def close(self) -> None:
        for circ in self.retired + ([self.current] if self.current else []):
            await circ.destroy()
        self.retired.clear()
        self.current = None


async def rotate_circuit(manager: CircuitManager) -> Circuit:
    return await manager.rotate()


async def open_stream(circuit: Circuit, destination: str, timeout: float = CONNECT_TIMEOUT) -> Stream:
    return await circuit.open_stream(destination, timeout)


async def resolve_via_circuit(circuit: Circuit, hostname: str) -> str:
    return await circuit.resolve(hostname)
