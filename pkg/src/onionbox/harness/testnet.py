"""Boot a whole desk-scale network on loopback inside the running event loop."""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field
from typing import Optional, Union

from .. import directory as dirclient
from ..directory import ALL_ROLES, DirectoryServer
from ..errors import SpawnError
from ..gateway import Gateway, GatewayConfig, Mode
from ..relay import Relay
from ..resolver import StaticResolver, TrapResolver
from .servers import ByteSink, ByteSource, EchoServer, TcpTap

log = logging.getLogger(__name__)

DEFAULT_EXIT_HOSTS = {"localhost": "127.0.0.1", "echo.test": "127.0.0.1", "sink.test": "127.0.0.1",
                      "source.test": "127.0.0.1", "example.test": "10.0.0.9"}


@dataclass
class RelaySpec:
    roles: frozenset = ALL_ROLES
    rate_mbps: Optional[float] = None
    port: int = 0
    tap: bool = False


@dataclass
class GatewaySpec:
    mode: Mode = Mode.ONION
    path_length: int = 3
    leaky_mode: bool = False
    circuit_lifetime: float = 600.0
    pool_size: int = 1
    port: int = 0
    use_trap: bool = True


@dataclass
class TestnetSpec:
    __test__ = False

    relays: Union[int, list[RelaySpec]] = 3
    gateways: list[GatewaySpec] = field(default_factory=lambda: [GatewaySpec()])
    directory_port: int = 0
    exit_hosts: dict = field(default_factory=lambda: dict(DEFAULT_EXIT_HOSTS))
    trap_port: int = 0
    echo_port: int = 0
    sink_port: int = 0
    source_port: int = 0
    boot_timeout: float = 5.0
    seed: Optional[int] = None

    def relay_specs(self) -> list[RelaySpec]:
        if isinstance(self.relays, int):
            return [RelaySpec() for _ in range(self.relays)]
        return list(self.relays)


class Testnet:
    __test__ = False  # keeps pytest from collecting it

    def __init__(self, spec: TestnetSpec):
        self.spec = spec
        self.directory: Optional[DirectoryServer] = None
        self.relays: list[Relay] = []
        self.relay_taps: dict[int, TcpTap] = {}
        self.gateways: list[Gateway] = []
        self.trap: Optional[TrapResolver] = None
        self.echo = EchoServer(port=spec.echo_port)
        self.sink = ByteSink(port=spec.sink_port)
        self.source = ByteSource(port=spec.source_port)
        self._started: list = []

    @property
    def gateway(self) -> Gateway:
        return self.gateways[0]

    def gateway_for(self, mode: Mode, path_length: Optional[int] = None) -> Gateway:
        for gw in self.gateways:
            if gw.config.mode is mode and (path_length is None or gw.config.path_length == path_length):
                return gw
        raise LookupError(f"no {mode.value} gateway with path length {path_length}")

    async def _start(self, name: str, component):
        try:
            await component.start()
        except OSError as exc:
            raise SpawnError(f"{name} could not bind: {exc}") from exc
        self._started.append(component)
        return component

    async def boot(self) -> "Testnet":
        spec = self.spec
        rng = random.Random(spec.seed) if spec.seed is not None else None
        self.trap = await self._start("trap-resolver", TrapResolver(port=spec.trap_port, answers=spec.exit_hosts))
        self.directory = await self._start("directory", DirectoryServer(port=spec.directory_port))
        for server in (self.echo, self.sink, self.source):
            await self._start(f"{server.name}-server", server)
        for i, rs in enumerate(spec.relay_specs()):
            relay = Relay(roles=rs.roles, port=rs.port, rate_mbps=rs.rate_mbps, name=f"relay-{i}",
                          resolver=StaticResolver(spec.exit_hosts))
            await self._start(f"relay-{i}", relay)
            if rs.tap:
                tap = await self._start(f"relay-{i}-tap", TcpTap(relay.address, framed=True))
                self.relay_taps[i] = tap
                relay.advertise = tap.address
            await dirclient.register(self.directory.address, relay.descriptor)
            self.relays.append(relay)
        for i, gs in enumerate(spec.gateways):
            config = GatewayConfig(
                listen_addr=f"127.0.0.1:{gs.port}", directory_addr=self.directory.address,
                path_length=gs.path_length, circuit_lifetime=gs.circuit_lifetime, mode=gs.mode,
                host_resolver=self.trap.address if gs.use_trap else None, leaky_mode=gs.leaky_mode,
                pool_size=gs.pool_size)
            self.gateways.append(await self._start(f"gateway-{i}", Gateway(config, rng)))
        for gw in self.gateways:
            if gw.config.mode is Mode.ONION:
                await gw.wait_ready(spec.boot_timeout)
        return self

    async def close(self) -> None:
        for component in reversed(self._started):
            try:
                await component.stop()
            except Exception:
                log.exception("error stopping %r", component)
        self._started.clear()

    async def __aenter__(self) -> "Testnet":
        return self

    async def __aexit__(self, *exc) -> None:
        await self.close()

    def topology(self) -> dict:
        return {
            "directory": self.directory.address,
            "relays": [{"name": r.name, "address": r.descriptor.address, "roles": sorted(x.value for x in r.roles)}
                       for r in self.relays],
            "gateways": [{"address": g.address, "mode": g.config.mode.value, "path_length": g.config.path_length}
                         for g in self.gateways],
            "echo": self.echo.address, "sink": self.sink.address, "source": self.source.address,
            "trap_resolver": self.trap.address,
        }


async def spawn_testnet(spec: Optional[TestnetSpec] = None) -> Testnet:
    """Start every component; on any failure, tear down what was started and re-raise."""
    net = Testnet(spec or TestnetSpec())
    try:
        return await net.boot()
    except BaseException:
        await net.close()
        raise
