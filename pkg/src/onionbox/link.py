"""A TCP connection that carries nothing but 512-octet cells."""

from __future__ import annotations

import asyncio
import logging
from typing import Awaitable, Callable, Optional

from .cell import CELL_SIZE, Cell, decode_cell, encode_cell
from .errors import FramingError, ProtocolError

log = logging.getLogger(__name__)

READ_CHUNK = 64 * 1024


def split_address(address: str) -> tuple[str, int]:
    host, sep, port = address.rpartition(":")
    if not sep or not host or not port.isdigit():
        raise ValueError(f"expected host:port, got {address!r}")
    return host, int(port)


def join_address(host: str, port: int) -> str:
    return f"{host}:{port}"


class TokenBucket:
    """Rate limiter in bits per second.  Debt is allowed; the debtor sleeps it off."""

    def __init__(self, rate_mbps: float, burst_bytes: int = 8 * CELL_SIZE):
        if rate_mbps <= 0:
            raise ValueError("rate must be positive")
        self.rate = rate_mbps * 1e6 / 8  # bytes per second
        self.burst = burst_bytes
        self._tokens = float(burst_bytes)
        self._stamp: float | None = None

    async def consume(self, n: int) -> None:
        now = asyncio.get_running_loop().time()
        if self._stamp is None:
            self._stamp = now
        self._tokens = min(self.burst, self._tokens + (now - self._stamp) * self.rate)
        self._stamp = now
        self._tokens -= n
        if self._tokens < 0:
            await asyncio.sleep(-self._tokens / self.rate)


CellHandler = Callable[["Link", Cell], Awaitable[None]]
CloseHandler = Callable[["Link"], None]


class Link:
    """Bidirectional cell pipe to one neighbour.

    Writes are issued synchronously so cells leave in the order they were
    produced, which keeps nonce counters aligned with the peer.
    """

    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter,
                 bucket: Optional[TokenBucket] = None, name: str = ""):
        self.reader = reader
        self.writer = writer
        self.bucket = bucket
        self.name = name or str(writer.get_extra_info("peername"))
        self.closed = False
        self.cells_sent = 0
        self.cells_received = 0
        self._drain_lock = asyncio.Lock()
        self._task: asyncio.Task | None = None

    def __repr__(self):
        return f"<Link {self.name}{' closed' if self.closed else ''}>"

    @classmethod
    async def connect(cls, address: str, timeout: float = 5.0, bucket: Optional[TokenBucket] = None) -> "Link":
        host, port = split_address(address)
        reader, writer = await asyncio.wait_for(asyncio.open_connection(host, port), timeout)
        return cls(reader, writer, bucket, name=address)

    def start(self, on_cell: CellHandler, on_close: Optional[CloseHandler] = None) -> asyncio.Task:
        self._task = asyncio.create_task(self._read_loop(on_cell, on_close))
        return self._task

    async def send(self, *cells: Cell) -> None:
        if self.closed:
            return
        data = b"".join(encode_cell(c) for c in cells)
        self.writer.write(data)
        self.cells_sent += len(cells)
        if self.bucket is not None:
            await self.bucket.consume(len(data))
        async with self._drain_lock:
            try:
                await self.writer.drain()
            except (ConnectionError, RuntimeError):
                self.close()

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self.writer.close()

    async def _read_loop(self, on_cell: CellHandler, on_close: Optional[CloseHandler]) -> None:
        buf = bytearray()
        try:
            while True:
                data = await self.reader.read(READ_CHUNK)
                if not data:
                    break
                buf += data
                whole = len(buf) - len(buf) % CELL_SIZE
                for off in range(0, whole, CELL_SIZE):
                    cell = decode_cell(bytes(buf[off:off + CELL_SIZE]))
                    self.cells_received += 1
                    await on_cell(self, cell)
                del buf[:whole]
        except (FramingError, ProtocolError) as exc:
            log.warning("dropping link %s: %s", self.name, exc)
        except (ConnectionError, asyncio.IncompleteReadError):
            pass
        except asyncio.CancelledError:
            pass
        except Exception:
            log.exception("cell handler crashed on link %s", self.name)
        finally:
            self.close()
            if on_close is not None:
                on_close(self)

    async def wait_closed(self) -> None:
        if self._task is not None and self._task is not asyncio.current_task():
            try:
                await self._task
            except asyncio.CancelledError:
                pass
        try:
            await self.writer.wait_closed()
        except (ConnectionError, RuntimeError):
            pass

    def cancel(self) -> None:
        self.close()
        if self._task is not None:
            self._task.cancel()
