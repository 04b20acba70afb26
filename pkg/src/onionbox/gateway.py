"""The router stand-in: a SOCKS5 front door that pushes every connection, and
every name lookup, through onion circuits.

Supported SOCKS5 subset (RFC 1928): no-auth method only; CONNECT; address
types IPv4 and DOMAIN.  As in Tor's SOCKS port, command 0xF0 (RESOLVE) returns
the address the exit resolved for a DOMAIN.  DIRECT mode skips the circuit and
is the "no onion routing" baseline.
"""

from __future__ import annotations

import asyncio
import enum
import ipaddress
import json
import logging
import random
import struct
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

from . import directory as dirclient
from .client import DEFAULT_PATH_LENGTH, Circuit, build_circuit, select_path
from .errors import (CircuitBuildError, CircuitClosedError, DirectoryError, OnionError, ResolutionError,
                     SelectionError, StreamOpenError)
from .link import join_address, split_address
from .resolver import DnsResolver, is_ipv4

log = logging.getLogger(__name__)

SOCKS_VERSION = 5
NO_AUTH = 0x00
NO_ACCEPTABLE = 0xFF
CMD_CONNECT = 0x01
CMD_RESOLVE = 0xF0
ATYP_IPV4 = 0x01
ATYP_DOMAIN = 0x03
ATYP_IPV6 = 0x04

REP_OK = 0x00
REP_FAILURE = 0x01
REP_HOST_UNREACHABLE = 0x04
REP_REFUSED = 0x05
REP_COMMAND_UNSUPPORTED = 0x07
REP_ATYP_UNSUPPORTED = 0x08

BACKOFF_BASE = 0.5
BACKOFF_CAP = 30.0


class Mode(str, enum.Enum):
    ONION = "onion"
    DIRECT = "direct"


@dataclass
class GatewayConfig:
    listen_addr: str = "127.0.0.1:0"
    directory_addr: Optional[str] = None
    path_length: int = DEFAULT_PATH_LENGTH
    circuit_lifetime: float = 600.0
    mode: Mode = Mode.ONION
    host_resolver: Optional[str] = None
    leaky_mode: bool = False
    pool_size: int = 1

    def __post_init__(self):
        self.mode = Mode(self.mode)
        if self.path_length < 1:
            raise ValueError("path_length must be >= 1")
        if self.pool_size < 1:
            raise ValueError("pool_size must be >= 1")
        if self.mode is Mode.ONION and not self.directory_addr:
            raise ValueError("ONION mode needs a directory address")

    @classmethod
    def from_dict(cls, obj: dict) -> "GatewayConfig":
        known = {k: v for k, v in obj.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    @classmethod
    def from_file(cls, path, **overrides) -> "GatewayConfig":
        obj = json.loads(Path(path).read_text())
        obj.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(obj)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        return d


class CircuitPool:
    """Keeps ``size`` ready circuits, retiring ones older than ``lifetime``."""

    def __init__(self, directory_addr: str, path_length: int, lifetime: float, size: int = 1,
                 rng: Optional[random.Random] = None):
        self.directory_addr = directory_addr
        self.path_length = path_length
        self.lifetime = lifetime
        self.size = size
        self.rng = rng or random.SystemRandom()
        self.circuits: list[Circuit] = []
        self.retired: list[Circuit] = []
        self.failures = 0
        self.next_attempt = 0.0
        self.last_error: Optional[Exception] = None
        self.degraded = False
        self.built = 0
        self._lock = asyncio.Lock()
        self._rr = 0

    def ready(self) -> list[Circuit]:
        self.circuits = [c for c in self.circuits if not c.closed]
        return self.circuits

    async def build_one(self) -> Circuit:
        snapshot = await dirclient.fetch_snapshot(self.directory_addr)
        circuit = await build_circuit(select_path(snapshot, self.path_length, self.rng))
        self.built += 1
        return circuit

    def backoff(self) -> float:
        return min(BACKOFF_BASE * 2 ** max(self.failures - 1, 0), BACKOFF_CAP)

    async def tick(self, now: Optional[float] = None) -> list[str]:
        """One maintenance pass; returns a list of the actions taken."""
        now = time.monotonic() if now is None else now
        actions = []
        async with self._lock:
            for circ in list(self.ready()):
                if now - circ.created_at >= self.lifetime:
                    try:
                        fresh = await self.build_one()
                    except (OnionError, OSError) as exc:
                        self._failed(exc, now)
                        actions.append("rotate-failed")
                        break
                    self.circuits[self.circuits.index(circ)] = fresh
                    circ.close_when_idle()
                    self.retired.append(circ)
                    actions.append("rotated")
            self.retired = [c for c in self.retired if not c.closed]
            while len(self.ready()) < self.size and now >= self.next_attempt:
                try:
                    self.circuits.append(await self.build_one())
                except (OnionError, OSError) as exc:
                    self._failed(exc, now)
                    actions.append("build-failed")
                    break
                self.failures, self.degraded, self.last_error = 0, False, None
                actions.append("built")
        return actions

    def _failed(self, exc: Exception, now: float) -> None:
        self.failures += 1
        self.last_error = exc
        self.degraded = True
        self.next_attempt = now + self.backoff()
        log.warning("circuit pool degraded (%s); retry in %.1f s", exc, self.backoff())

    async def get(self) -> Circuit:
        ready = self.ready()
        if not ready:
            async with self._lock:
                if not self.ready():
                    self.circuits.append(await self.build_one())
            ready = self.ready()
        self._rr = (self._rr + 1) % len(ready)
        return ready[self._rr]

    async def rebuild(self, broken: Optional[Circuit] = None) -> Circuit:
        async with self._lock:
            if broken is not None and broken in self.circuits:
                self.circuits.remove(broken)
                await broken.destroy()
            circuit = await self.build_one()
            self.circuits.append(circuit)
            return circuit

    async def close(self) -> None:
        for circ in self.circuits + self.retired:
            await circ.destroy()
        self.circuits.clear()
        self.retired.clear()


async def circuit_pool_tick(pool: CircuitPool, now: Optional[float] = None) -> list[str]:
    return await pool.tick(now)


async def _pump_to_stream(reader: asyncio.StreamReader, stream) -> None:
    try:
        while data := await reader.read(64 * 1024):
            await stream.write(data)
    except (ConnectionError, OnionError):
        pass


async def _pump_from_stream(stream, writer: asyncio.StreamWriter) -> None:
    try:
        while data := await stream.read():
            writer.write(data)
            await writer.drain()
    except (ConnectionError, OnionError):
        pass


async def _pump_tcp(reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
    try:
        while data := await reader.read(64 * 1024):
            writer.write(data)
            await writer.drain()
    except ConnectionError:
        pass
    finally:
        writer.close()


class Gateway:
    def __init__(self, config: GatewayConfig, rng: Optional[random.Random] = None):
        self.config = config
        self.pool: Optional[CircuitPool] = None
        if config.mode is Mode.ONION:
            self.pool = CircuitPool(config.directory_addr, config.path_length, config.circuit_lifetime,
                                    config.pool_size, rng)
        self.host_resolver = DnsResolver(config.host_resolver) if config.host_resolver else None
        self.connections = 0
        self.direct_connects: list[str] = []
        self._server: asyncio.AbstractServer | None = None
        self._maint: asyncio.Task | None = None
        self._handlers: set[asyncio.Task] = set()
        self.host, self.port = split_address(config.listen_addr)

    @property
    def address(self) -> str:
        return join_address(self.host, self.port)

    async def start(self) -> "Gateway":
        self._server = await asyncio.start_server(self._accept, self.host, self.port)
        self.port = self._server.sockets[0].getsockname()[1]
        log.info("gateway (%s) listening on %s", self.config.mode.value, self.address)
        if self.pool is not None:
            await self.pool.tick()
            self._maint = asyncio.create_task(self._maintain())
        return self

    async def wait_ready(self, timeout: float = 5.0) -> Circuit:
        """Block until a circuit is up; re-raises the pool's last error on timeout."""
        if self.pool is None:
            raise ValueError("DIRECT gateways have no circuits")
        deadline = time.monotonic() + timeout
        while not self.pool.ready():
            if isinstance(self.pool.last_error, SelectionError):
                raise self.pool.last_error
            if time.monotonic() >= deadline:
                raise self.pool.last_error or asyncio.TimeoutError("no circuit ready")
            await asyncio.sleep(0.05)
        return self.pool.ready()[0]

    async def _maintain(self) -> None:
        period = max(0.05, min(1.0, self.config.circuit_lifetime / 4))
        while True:
            await asyncio.sleep(period)
            try:
                await self.pool.tick()
            except Exception:
                log.exception("pool maintenance failed")

    async def stop(self) -> None:
        if self._maint is not None:
            self._maint.cancel()
        if self._server is not None:
            self._server.close()
        for task in list(self._handlers):
            task.cancel()
        if self._handlers:
            await asyncio.gather(*self._handlers, return_exceptions=True)
        if self.pool is not None:
            await self.pool.close()
        if self._server is not None:
            await self._server.wait_closed()
            self._server = None

    # -- resolution --

    async def _local_lookup(self, host: str) -> Optional[str]:
        """Resolve on the gateway host.  In ONION mode this only happens when leaky."""
        if self.host_resolver is not None:
            return await self.host_resolver.resolve(host)
        loop = asyncio.get_running_loop()
        try:
            infos = await loop.getaddrinfo(host, None, family=2, type=1)
        except OSError:
            return None
        return infos[0][4][0] if infos else None

    async def resolve(self, hostname: str) -> str:
        if is_ipv4(hostname):
            return hostname
        if self.config.mode is Mode.DIRECT:
            ip = await self._local_lookup(hostname)
            if ip is None:
                raise ResolutionError(hostname, 0x04)
            return ip
        if self.config.leaky_mode:
            await self._local_lookup(hostname)
        return await self._with_circuit(lambda c: c.resolve(hostname))

    async def _with_circuit(self, action):
        """Run ``action(circuit)``; on circuit failure rebuild once and retry."""
        circuit = None
        try:
            circuit = await self.pool.get()
            return await action(circuit)
        except (CircuitClosedError, CircuitBuildError, DirectoryError, SelectionError, OSError) as exc:
            log.info("circuit failed (%s); rebuilding once", exc)
        except StreamOpenError as exc:
            if exc.reason != 5:
                raise
        circuit = await self.pool.rebuild(circuit)
        return await action(circuit)

    # -- SOCKS --

    async def _accept(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        task = asyncio.current_task()
        self._handlers.add(task)
        self.connections += 1
        try:
            await self._socks(reader, writer)
        except (asyncio.IncompleteReadError, ConnectionError):
            pass
        except asyncio.CancelledError:
            pass
        finally:
            self._handlers.discard(task)
            writer.close()

    @staticmethod
    def _reply(writer, rep: int, ip: str = "0.0.0.0", port: int = 0) -> None:
        writer.write(struct.pack(">BBBB", SOCKS_VERSION, rep, 0, ATYP_IPV4)
                     + ipaddress.IPv4Address(ip).packed + struct.pack(">H", port))

    async def _socks(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        ver, nmethods = await reader.readexactly(2)
        methods = await reader.readexactly(nmethods)
        if ver != SOCKS_VERSION:
            self._reply(writer, REP_COMMAND_UNSUPPORTED)
            return
        if NO_AUTH not in methods:
            writer.write(bytes((SOCKS_VERSION, NO_ACCEPTABLE)))
            await writer.drain()
            return
        writer.write(bytes((SOCKS_VERSION, NO_AUTH)))
        ver, cmd, _, atyp = await reader.readexactly(4)
        if atyp == ATYP_IPV4:
            host = str(ipaddress.IPv4Address(await reader.readexactly(4)))
        elif atyp == ATYP_DOMAIN:
            (n,) = await reader.readexactly(1)
            host = (await reader.readexactly(n)).decode("idna")
        elif atyp == ATYP_IPV6:
            await reader.readexactly(16 + 2)
            self._reply(writer, REP_ATYP_UNSUPPORTED)
            return
        else:
            self._reply(writer, REP_ATYP_UNSUPPORTED)
            return
        (port,) = struct.unpack(">H", await reader.readexactly(2))
        if ver != SOCKS_VERSION or cmd not in (CMD_CONNECT, CMD_RESOLVE):
            self._reply(writer, REP_COMMAND_UNSUPPORTED)
            return
        if cmd == CMD_RESOLVE:
            try:
                ip = await self.resolve(host)
            except (OnionError, OSError):
                self._reply(writer, REP_HOST_UNREACHABLE)
            else:
                self._reply(writer, REP_OK, ip)
            return
        if self.config.mode is Mode.DIRECT:
            await self._connect_direct(reader, writer, host, port)
        else:
            await self._connect_onion(reader, writer, host, port)

    async def _connect_direct(self, reader, writer, host: str, port: int) -> None:
        ip = host if is_ipv4(host) else await self._local_lookup(host)
        if ip is None:
            self._reply(writer, REP_HOST_UNREACHABLE)
            return
        try:
            up_reader, up_writer = await asyncio.wait_for(asyncio.open_connection(ip, port), 10)
        except (OSError, asyncio.TimeoutError):
            self._reply(writer, REP_REFUSED)
            return
        self.direct_connects.append(join_address(ip, port))
        self._reply(writer, REP_OK)
        await asyncio.gather(_pump_tcp(reader, up_writer), _pump_tcp(up_reader, writer))

    async def _connect_onion(self, reader, writer, host: str, port: int) -> None:
        if self.config.leaky_mode and not is_ipv4(host):
            await self._local_lookup(host)
        destination = join_address(host, port)  # hostnames go to the exit verbatim
        try:
            stream = await self._with_circuit(lambda c: c.open_stream(destination))
        except StreamOpenError as exc:
            self._reply(writer, REP_REFUSED if exc.reason == 3 else REP_HOST_UNREACHABLE)
            return
        except (OnionError, OSError) as exc:
            log.info("CONNECT %s failed: %s", destination, exc)
            self._reply(writer, REP_FAILURE)
            return
        self._reply(writer, REP_OK)
        pumps = {asyncio.create_task(_pump_to_stream(reader, stream)),
                 asyncio.create_task(_pump_from_stream(stream, writer))}
        try:
            # no half-close: EOF from either side ends the stream
            await asyncio.wait(pumps, return_when=asyncio.FIRST_COMPLETED)
        finally:
            for task in pumps:
                task.cancel()
            await asyncio.gather(*pumps, return_exceptions=True)
            await stream.close()


async def serve_proxy(config: GatewayConfig, rng: Optional[random.Random] = None) -> Gateway:
    return await Gateway(config, rng).start()
