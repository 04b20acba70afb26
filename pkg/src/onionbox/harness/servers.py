"""Destination servers and a tapping TCP proxy for instrumented links.

Byte sink:   client sends a u64 length then that many bytes; sink answers with
             the u64 count it received (the acknowledgement that stops the clock).
Byte source: client sends a u64 length; source streams that many bytes.
Echo:        returns whatever it reads.
"""

from __future__ import annotations

import asyncio
import os
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

from ..cell import CELL_SIZE
from ..link import join_address, split_address

_U64 = struct.Struct(">Q")
_BLOCK = os.urandom(1 << 20)


class _Server:
    name = "server"

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self.host = host
        self.port = port
        self._server: asyncio.AbstractServer | None = None
        self._writers: set[asyncio.StreamWriter] = set()
        self.connections = 0

    @property
    def address(self) -> str:
        return join_address(self.host, self.port)

    async def start(self):
        self._server = await asyncio.start_server(self._wrap, self.host, self.port)
        self.port = self._server.sockets[0].getsockname()[1]
        return self

    async def stop(self) -> None:
        if self._server is not None:
            self._server.close()
            for w in list(self._writers):
                w.close()
            await self._server.wait_closed()
            self._server = None

    async def _wrap(self, reader, writer) -> None:
        self._writers.add(writer)
        self.connections += 1
        try:
            await self.serve(reader, writer)
        except (ConnectionError, asyncio.IncompleteReadError):
            pass
        finally:
            self._writers.discard(writer)
            writer.close()

    async def serve(self, reader, writer) -> None:
        raise NotImplementedError


class EchoServer(_Server):
    name = "echo"

    def __init__(self, host="127.0.0.1", port=0):
        super().__init__(host, port)
        self.bytes_echoed = 0

    async def serve(self, reader, writer) -> None:
        while data := await reader.read(64 * 1024):
            self.bytes_echoed += len(data)
            writer.write(data)
            await writer.drain()


class ByteSink(_Server):
    name = "sink"

    def __init__(self, host="127.0.0.1", port=0):
        super().__init__(host, port)
        self.bytes_received = 0

    async def serve(self, reader, writer) -> None:
        while header := await reader.read(_U64.size):
            if len(header) < _U64.size:
                header += await reader.readexactly(_U64.size - len(header))
            (want,) = _U64.unpack(header)
            got = 0
            while got < want:
                data = await reader.read(min(want - got, 256 * 1024))
                if not data:
                    return
                got += len(data)
                self.bytes_received += len(data)
            writer.write(_U64.pack(got))
            await writer.drain()


class ByteSource(_Server):
    name = "source"

    def __init__(self, host="127.0.0.1", port=0):
        super().__init__(host, port)
        self.bytes_sent = 0

    async def serve(self, reader, writer) -> None:
        while header := await reader.read(_U64.size):
            if len(header) < _U64.size:
                header += await reader.readexactly(_U64.size - len(header))
            (left,) = _U64.unpack(header)
            while left:
                n = min(left, len(_BLOCK))
                writer.write(_BLOCK[:n])
                await writer.drain()
                left -= n
                self.bytes_sent += n


Mutator = Callable[[int, bytes], Optional[bytes]]


@dataclass
class TapSession:
    """Traffic of one proxied connection, chunk by chunk as it was written onward."""
    forward: list[bytes] = field(default_factory=list)
    backward: list[bytes] = field(default_factory=list)


class TcpTap:
    """Transparent TCP forwarder that records traffic in both directions.

    ``forward``/``backward`` hold every chunk seen (client->upstream and
    upstream->client) across all connections; ``sessions`` keeps them apart per
    connection.  A ``framed`` tap forwards whole 512-octet frames only, and
    consults ``forward_mutator``/``backward_mutator`` (looked up per frame, so
    they can be swapped at any time): ``mutator(index, frame)`` may return a
    replacement frame, where index counts frames in that direction of that
    connection.
    """

    def __init__(self, upstream: str, host: str = "127.0.0.1", port: int = 0, *, framed: bool = False,
                 forward_mutator: Optional[Mutator] = None, backward_mutator: Optional[Mutator] = None):
        self.upstream = upstream
        self.host = host
        self.port = port
        self.framed = framed
        self.forward: list[bytes] = []
        self.backward: list[bytes] = []
        self.sessions: list[TapSession] = []
        self.forward_mutator = forward_mutator
        self.backward_mutator = backward_mutator
        self._server: asyncio.AbstractServer | None = None
        self._writers: set[asyncio.StreamWriter] = set()

    @property
    def address(self) -> str:
        return join_address(self.host, self.port)

    def forward_bytes(self) -> bytes:
        return b"".join(self.forward)

    def backward_bytes(self) -> bytes:
        return b"".join(self.backward)

    async def start(self) -> "TcpTap":
        self._server = await asyncio.start_server(self._serve, self.host, self.port)
        self.port = self._server.sockets[0].getsockname()[1]
        return self

    async def stop(self) -> None:
        if self._server is not None:
            self._server.close()
            for w in list(self._writers):
                w.close()
            await self._server.wait_closed()
            self._server = None

    async def _serve(self, reader, writer) -> None:
        host, port = split_address(self.upstream)
        try:
            up_reader, up_writer = await asyncio.open_connection(host, port)
        except OSError:
            writer.close()
            return
        session = TapSession()
        self.sessions.append(session)
        self._writers.update((writer, up_writer))
        try:
            await asyncio.gather(self._pipe(reader, up_writer, session.forward, self.forward, "forward_mutator"),
                                 self._pipe(up_reader, writer, session.backward, self.backward, "backward_mutator"))
        finally:
            self._writers.difference_update((writer, up_writer))

    async def _pipe(self, reader, writer, log: list, total: list, mutator_attr: str) -> None:
        buf = bytearray()
        index = 0
        try:
            while data := await reader.read(64 * 1024):
                if self.framed:
                    buf += data
                    whole = len(buf) - len(buf) % CELL_SIZE
                    out = []
                    for off in range(0, whole, CELL_SIZE):
                        frame = bytes(buf[off:off + CELL_SIZE])
                        mutator = getattr(self, mutator_attr)
                        if mutator is not None:
                            frame = mutator(index, frame) or frame
                        index += 1
                        out.append(frame)
                    del buf[:whole]
                    data = b"".join(out)
                    if not data:
                        continue
                log.append(data)
                total.append(data)
                writer.write(data)
                await writer.drain()
        except ConnectionError:
            pass
        finally:
            if buf:  # trailing partial frame: pass it on and keep it visible in the log
                log.append(bytes(buf))
                total.append(bytes(buf))
                if not writer.is_closing():
                    writer.write(bytes(buf))
            writer.close()
