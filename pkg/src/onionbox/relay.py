"""Relay node: handshakes, one-layer peeling, forwarding, and exit streams.

A relay never learns more than its two neighbours on a circuit.  Its
per-circuit record (:class:`RelayCircuitState`) holds the previous link, the
next link and a single session key; exit streams live in a separate table
that only the terminal hop ever populates.
"""

from __future__ import annotations

import asyncio
import logging
import os
import random
import struct
from dataclasses import dataclass, field
from typing import Optional

from . import directory as dirclient
from .cell import Cell, Command, RelayCommand, RelayMessage
from .directory import ALL_ROLES, RelayDescriptor
from .errors import HandshakeError, OnionError, ProtocolError, SizeError, UnwrapError
from .handshake import IdentityKey, server_handshake
from .link import Link, TokenBucket, join_address, split_address
from .onion import MAX_PATH_LENGTH, LayerFlag, SessionKey, max_relay_data, seal_backward, unwrap_layer
from .resolver import StaticResolver, is_ipv4

log = logging.getLogger(__name__)

EXIT_CONNECT_TIMEOUT = 5.0
# The exit cannot see how many relays sit behind it, so backward DATA is sized
# for the longest supported path.
EXIT_CHUNK = max_relay_data(MAX_PATH_LENGTH)


class EndReason:
    MISC = 1
    RESOLVE_FAILED = 2
    CONNECT_REFUSED = 3
    DESTROYED = 5
    DONE = 6
    TIMEOUT = 7
    UNKNOWN_STREAM = 8


RESOLVED_OK = 0x00
RESOLVED_FAILURE = 0x04


def encode_extend(address: str, blob: bytes) -> bytes:
    raw = address.encode()
    return struct.pack(">H", len(raw)) + raw + blob


def decode_extend(data: bytes) -> tuple[str, bytes]:
    if len(data) < 2:
        raise ProtocolError("truncated EXTEND")
    (n,) = struct.unpack_from(">H", data)
    if len(data) < 2 + n:
        raise ProtocolError("truncated EXTEND address")
    return data[2:2 + n].decode(), data[2 + n:]


@dataclass(eq=False)
class RelayCircuitState:
    prev_link: Link
    prev_circ_id: int
    session: SessionKey
    next_link: Optional[Link] = None
    next_circ_id: Optional[int] = None

    @property
    def forwarding(self) -> bool:
        return self.next_link is not None


@dataclass(eq=False)
class ExitStream:
    stream_id: int
    destination: str
    writer: Optional[asyncio.StreamWriter] = None
    pump: Optional[asyncio.Task] = field(default=None, repr=False)


class Relay:
    def __init__(self, identity: Optional[IdentityKey] = None, *, host: str = "127.0.0.1", port: int = 0,
                 roles=ALL_ROLES, resolver=None, directory_addr: Optional[str] = None,
                 rate_mbps: Optional[float] = None, advertise: Optional[str] = None,
                 name: str = "relay", trace: bool = False):
        self.identity = identity or IdentityKey.generate()
        self.relay_id = os.urandom(16)
        self.host = host
        self.port = port
        self.roles = frozenset(roles)
        self.resolver = resolver or StaticResolver()
        self.directory_addr = directory_addr
        self.bucket = TokenBucket(rate_mbps) if rate_mbps else None
        self.advertise = advertise
        self.name = name
        self.circuits: dict[tuple[Link, int], RelayCircuitState] = {}
        self._outbound: dict[tuple[Link, int], RelayCircuitState] = {}
        self.exit_streams: dict[tuple[int, int], ExitStream] = {}
        self.trace: Optional[list[tuple]] = [] if trace else None
        self.destroys_received = 0
        self.destroys_sent = 0
        self._server: asyncio.AbstractServer | None = None
        self._links: set[Link] = set()
        self._out_links: dict[str, Link] = {}
        self._connecting: dict[str, asyncio.Future] = {}
        self._tasks: set[asyncio.Task] = set()

    def __repr__(self):
        return f"<Relay {self.name} {self.address}>"

    # -- lifecycle ------------------------------------------------------------

    @property
    def address(self) -> str:
        return join_address(self.host, self.port)

    @property
    def descriptor(self) -> RelayDescriptor:
        return RelayDescriptor(self.relay_id, self.advertise or self.address, self.roles, self.identity.public_bytes)

    async def start(self) -> "Relay":
        self._server = await asyncio.start_server(self._accept, self.host, self.port)
        self.port = self._server.sockets[0].getsockname()[1]
        log.info("%s listening on %s", self.name, self.address)
        if self.directory_addr:
            await dirclient.register(self.directory_addr, self.descriptor)
        return self

    async def stop(self) -> None:
        if self._server is not None:
            self._server.close()
        for task in list(self._tasks):
            task.cancel()
        for stream in list(self.exit_streams.values()):
            self._close_exit_stream(stream)
        for link in list(self._links):
            link.cancel()
        for link in list(self._links):
            await link.wait_closed()
        if self._server is not None:
            await self._server.wait_closed()
            self._server = None
        self.circuits.clear()
        self._outbound.clear()

    def _spawn(self, coro) -> asyncio.Task:
        task = asyncio.create_task(coro)
        self._tasks.add(task)
        task.add_done_callback(self._tasks.discard)
        return task

    def _adopt(self, link: Link) -> Link:
        self._links.add(link)
        link.start(self._on_cell, self._on_link_closed)
        return link

    async def _accept(self, reader, writer) -> None:
        self._adopt(Link(reader, writer, self.bucket))

    async def _link_to(self, address: str) -> Link:
        link = self._out_links.get(address)
        if link is not None and not link.closed:
            return link
        pending = self._connecting.get(address)
        if pending is not None:
            return await asyncio.shield(pending)
        fut = asyncio.get_running_loop().create_future()
        self._connecting[address] = fut
        try:
            link = await Link.connect(address, EXIT_CONNECT_TIMEOUT, self.bucket)
        except BaseException as exc:
            fut.set_exception(exc)
            fut.exception()
            raise
        finally:
            del self._connecting[address]
        self._out_links[address] = self._adopt(link)
        fut.set_result(link)
        return link

    # -- dispatch -------------------------------------------------------------

    def _record(self, *event) -> None:
        if self.trace is not None:
            self.trace.append(event)

    async def _on_cell(self, link: Link, cell: Cell) -> None:
        key = (link, cell.circuit_id)
        cmd = cell.command
        if cmd is Command.RELAY:
            state = self.circuits.get(key)
            if state is not None:
                await self.handle_relay_forward(state, cell)
                return
            state = self._outbound.get(key)
            if state is not None:
                await self._relay_backward(state, cell.payload)
        elif cmd is Command.CREATE:
            await self.handle_create(link, cell)
        elif cmd is Command.CREATED:
            state = self._outbound.get(key)
            if state is not None:
                msg = RelayMessage(0, RelayCommand.EXTENDED, cell.payload)
                await self._send_backward(state, msg)
        elif cmd is Command.DESTROY:
            self.destroys_received += 1
            if key in self.circuits:
                await self._teardown(self.circuits[key], notify_prev=False, notify_next=True)
            elif key in self._outbound:
                await self._teardown(self._outbound[key], notify_prev=True, notify_next=False)

    def _on_link_closed(self, link: Link) -> None:
        self._links.discard(link)
        for addr, out in list(self._out_links.items()):
            if out is link:
                del self._out_links[addr]
        affected = {id(s): s for (lk, _), s in list(self.circuits.items()) + list(self._outbound.items()) if lk is link}
        for state in affected.values():
            self._spawn(self._teardown(state, notify_prev=state.prev_link is not link,
                                       notify_next=state.next_link is not link))

    # -- handshake ------------------------------------------------------------

    async def handle_create(self, link: Link, cell: Cell) -> None:
        key = (link, cell.circuit_id)
        old = self.circuits.get(key)
        if old is not None:
            await self._teardown(old, notify_prev=False, notify_next=True)
        try:
            created, session = server_handshake(cell.payload, self.identity)
        except HandshakeError as exc:
            log.info("%s: rejecting CREATE on circuit %d: %s", self.name, cell.circuit_id, exc)
            self.destroys_sent += 1
            await link.send(Cell(cell.circuit_id, Command.DESTROY))
            return
        self.circuits[key] = RelayCircuitState(link, cell.circuit_id, session)
        await link.send(Cell(cell.circuit_id, Command.CREATED, created))

    # -- forward path ---------------------------------------------------------

    async def handle_relay_forward(self, state: RelayCircuitState, cell: Cell) -> None:
        try:
            layer = unwrap_layer(cell.payload, state.session)
        except (UnwrapError, ProtocolError) as exc:
            log.info("%s: unwrap failed on circuit %d (%s); destroying", self.name, state.prev_circ_id, exc)
            await self._teardown(state, notify_prev=True, notify_next=True)
            return
        self._record("forward", layer.flag, len(cell.payload))
        if layer.flag is LayerFlag.FORWARD:
            if state.next_link is None:
                await self._teardown(state, notify_prev=True, notify_next=False)
                return
            await state.next_link.send(Cell(state.next_circ_id, Command.RELAY, layer.body))
            return
        try:
            msg = RelayMessage.decode(layer.body)
        except ProtocolError:
            await self._teardown(state, notify_prev=True, notify_next=True)
            return
        self._record("deliver", msg.relay_cmd, len(cell.payload))
        await self._dispatch(state, msg)

    async def _dispatch(self, state: RelayCircuitState, msg: RelayMessage) -> None:
        cmd = msg.relay_cmd
        if cmd is RelayCommand.EXTEND:
            await self.handle_extend(msg, state)
        elif cmd is RelayCommand.BEGIN:
            self.handle_begin(msg, state)
        elif cmd is RelayCommand.DATA:
            await self.handle_data(msg, state)
        elif cmd is RelayCommand.END:
            self.handle_end(msg, state)
        elif cmd is RelayCommand.RESOLVE:
            self._spawn(self.handle_resolve(msg, state))
        else:
            await self._teardown(state, notify_prev=True, notify_next=True)

    async def handle_extend(self, msg: RelayMessage, state: RelayCircuitState) -> None:
        if state.next_link is not None or state.next_circ_id is not None:
            log.info("%s: EXTEND on an already extended circuit", self.name)
            await self._teardown(state, notify_prev=True, notify_next=True)
            return
        try:
            target, blob = decode_extend(msg.data)
            split_address(target)
        except (ProtocolError, ValueError, UnicodeDecodeError):
            await self._teardown(state, notify_prev=True, notify_next=False)
            return
        # reserve the slot so a second EXTEND racing the connect is refused
        state.next_circ_id = 0
        self._spawn(self._extend(state, target, blob))

    async def _extend(self, state: RelayCircuitState, target: str, blob: bytes) -> None:
        try:
            link = await self._link_to(target)
        except (OSError, asyncio.TimeoutError) as exc:
            log.info("%s: cannot extend to %s: %s", self.name, target, exc)
            state.next_circ_id = None
            await self._send_backward(state, RelayMessage(0, RelayCommand.EXTENDED, b""))
            return
        if self._live(state) is None:
            return
        while True:
            out_id = random.getrandbits(32) or 1
            if (link, out_id) not in self._outbound:
                break
        state.next_link, state.next_circ_id = link, out_id
        self._outbound[(link, out_id)] = state
        await link.send(Cell(out_id, Command.CREATE, blob))

    def _live(self, state: RelayCircuitState) -> Optional[RelayCircuitState]:
        return state if self.circuits.get((state.prev_link, state.prev_circ_id)) is state else None

    # -- backward path --------------------------------------------------------

    async def _relay_backward(self, state: RelayCircuitState, payload: bytes) -> None:
        try:
            body = seal_backward(payload, state.session, deliver=False)
        except SizeError:
            await self._teardown(state, notify_prev=True, notify_next=True)
            return
        await state.prev_link.send(Cell(state.prev_circ_id, Command.RELAY, body))

    async def _send_backward(self, state: RelayCircuitState, msg: RelayMessage) -> None:
        if self._live(state) is None:
            return
        body = seal_backward(msg.encode(), state.session, deliver=True)
        await state.prev_link.send(Cell(state.prev_circ_id, Command.RELAY, body))

    async def _teardown(self, state: RelayCircuitState, *, notify_prev: bool, notify_next: bool) -> None:
        prev_key = (state.prev_link, state.prev_circ_id)
        if self.circuits.get(prev_key) is not state:
            return
        del self.circuits[prev_key]
        if state.next_link is not None:
            self._outbound.pop((state.next_link, state.next_circ_id), None)
        for skey in [k for k in self.exit_streams if k[0] == id(state)]:
            self._close_exit_stream(self.exit_streams.pop(skey))
        sends = []
        if notify_prev:
            self.destroys_sent += 1
            sends.append(state.prev_link.send(Cell(state.prev_circ_id, Command.DESTROY)))
        if notify_next and state.next_link is not None and state.next_circ_id:
            self.destroys_sent += 1
            sends.append(state.next_link.send(Cell(state.next_circ_id, Command.DESTROY)))
        if sends:
            await asyncio.gather(*sends)

    # -- exit side ------------------------------------------------------------

    def handle_begin(self, msg: RelayMessage, state: RelayCircuitState) -> None:
        skey = (id(state), msg.stream_id)
        if skey in self.exit_streams:
            return
        try:
            destination = msg.data.decode()
        except UnicodeDecodeError:
            destination = ""
        stream = ExitStream(msg.stream_id, destination)
        self.exit_streams[skey] = stream
        stream.pump = self._spawn(self._open_exit(state, stream))

    async def _open_exit(self, state: RelayCircuitState, stream: ExitStream) -> None:
        sid = stream.stream_id
        try:
            host, port = split_address(stream.destination)
        except ValueError:
            await self._end_exit(state, stream, EndReason.MISC)
            return
        ip = host if is_ipv4(host) else await self.resolver.resolve(host)
        if ip is None:
            await self._end_exit(state, stream, EndReason.RESOLVE_FAILED)
            return
        try:
            reader, writer = await asyncio.wait_for(asyncio.open_connection(ip, port), EXIT_CONNECT_TIMEOUT)
        except asyncio.TimeoutError:
            await self._end_exit(state, stream, EndReason.TIMEOUT)
            return
        except OSError:
            await self._end_exit(state, stream, EndReason.CONNECT_REFUSED)
            return
        if self.exit_streams.get((id(state), sid)) is not stream:
            writer.close()
            return
        stream.writer = writer
        await self._send_backward(state, RelayMessage(sid, RelayCommand.CONNECTED, bytes(map(int, ip.split(".")))))
        try:
            while True:
                data = await reader.read(64 * 1024)
                if not data:
                    break
                for off in range(0, len(data), EXIT_CHUNK):
                    await self._send_backward(state, RelayMessage(sid, RelayCommand.DATA, data[off:off + EXIT_CHUNK]))
        except ConnectionError:
            pass
        if self.exit_streams.get((id(state), sid)) is stream:
            await self._end_exit(state, stream, EndReason.DONE)

    async def _end_exit(self, state: RelayCircuitState, stream: ExitStream, reason: int) -> None:
        if self.exit_streams.pop((id(state), stream.stream_id), None) is None:
            return
        self._close_exit_stream(stream, cancel=False)
        await self._send_backward(state, RelayMessage(stream.stream_id, RelayCommand.END, bytes((reason,))))

    def _close_exit_stream(self, stream: ExitStream, cancel: bool = True) -> None:
        if stream.writer is not None:
            stream.writer.close()
        if cancel and stream.pump is not None and stream.pump is not asyncio.current_task():
            stream.pump.cancel()

    async def handle_data(self, msg: RelayMessage, state: RelayCircuitState) -> None:
        stream = self.exit_streams.get((id(state), msg.stream_id))
        if stream is None or stream.writer is None:
            await self._send_backward(state, RelayMessage(msg.stream_id, RelayCommand.END, bytes((EndReason.UNKNOWN_STREAM,))))
            return
        if self.bucket is not None:
            # the rate limit covers all traffic this relay emits, including exit-side writes
            await self.bucket.consume(len(msg.data))
        stream.writer.write(msg.data)
        try:
            await stream.writer.drain()
        except ConnectionError:
            await self._end_exit(state, stream, EndReason.MISC)

    def handle_end(self, msg: RelayMessage, state: RelayCircuitState) -> None:
        stream = self.exit_streams.pop((id(state), msg.stream_id), None)
        if stream is not None:
            self._close_exit_stream(stream)

    async def handle_resolve(self, msg: RelayMessage, state: RelayCircuitState) -> None:
        try:
            ip = await self.resolver.resolve(msg.data.decode())
        except (UnicodeDecodeError, OnionError):
            ip = None
        if ip is None:
            data = bytes((RESOLVED_FAILURE,))
        else:
            data = bytes((RESOLVED_OK,)) + bytes(map(int, ip.split(".")))
        await self._send_backward(state, RelayMessage(msg.stream_id, RelayCommand.RESOLVED, data))

    # -- introspection --------------------------------------------------------

    def session_keys(self) -> list[SessionKey]:
        return [s.session for s in self.circuits.values()]
