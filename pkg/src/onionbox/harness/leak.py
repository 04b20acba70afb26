"""DNS leak test: drive name lookups through the gateway and count trap hits."""

from __future__ import annotations

import asyncio
import enum
import logging
from dataclasses import dataclass, field

from ..errors import HarnessError, OnionError
from ..gateway import Gateway, GatewayConfig
from ..link import split_address
from ..resolver import TrapHit, TrapResolver
from .socks import socks_connect, socks_resolve
from .testnet import GatewaySpec, TestnetSpec, spawn_testnet

log = logging.getLogger(__name__)


class Verdict(str, enum.Enum):
    NO_LEAK = "NO_LEAK"
    LEAK = "LEAK"


@dataclass
class LeakReport:
    trap_hits: list[TrapHit] = field(default_factory=list)
    connects: int = 0
    resolves: int = 0
    errors: int = 0

    @property
    def verdict(self) -> Verdict:
        return Verdict.LEAK if self.trap_hits else Verdict.NO_LEAK

    def summary(self) -> dict:
        return {
            "verdict": self.verdict.value, "trap_hits": len(self.trap_hits), "connects": self.connects,
            "resolves": self.resolves, "errors": self.errors,
            "queried_names": sorted({h.qname for h in self.trap_hits if h.qname}),
        }


async def run_dns_leak_test(gateway: Gateway, trap: TrapResolver, echo: str, *,
                            names: tuple[str, ...] = ("echo.test",), connects: int = 100,
                            resolves: int = 100) -> LeakReport:
    """``connects`` DOMAIN-type CONNECTs plus ``resolves`` RESOLVE requests.

    The trap's log is cleared before the workload and read only afterwards.
    """
    if not trap.address or trap.port == 0:
        raise HarnessError("trap resolver is not bound")
    _, port = split_address(echo)
    trap.clear()
    report = LeakReport()
    for i in range(connects):
        name = names[i % len(names)]
        try:
            reader, writer = await socks_connect(gateway.address, name, port)
            writer.write(b"ping")
            await asyncio.wait_for(reader.readexactly(4), 10)
            writer.close()
            report.connects += 1
        except (OSError, OnionError, asyncio.IncompleteReadError, asyncio.TimeoutError) as exc:
            log.info("leak-test connect %d failed: %s", i, exc)
            report.errors += 1
    for i in range(resolves):
        try:
            await socks_resolve(gateway.address, names[i % len(names)])
            report.resolves += 1
        except (OSError, OnionError, asyncio.IncompleteReadError, asyncio.TimeoutError) as exc:
            log.info("leak-test resolve %d failed: %s", i, exc)
            report.errors += 1
    await asyncio.sleep(0.05)  # let late datagrams land
    report.trap_hits = list(trap.hits)
    return report


async def leak_test_for_config(config: GatewayConfig, *, relays: int = 3, connects: int = 100,
                               resolves: int = 100) -> LeakReport:
    """Spawn a loopback network around a gateway configured like ``config`` and test it.

    Listen, directory and resolver addresses are replaced by the testnet's own;
    mode, path length and leaky flag are kept.
    """
    spec = TestnetSpec(relays=max(relays, config.path_length), gateways=[GatewaySpec(
        mode=config.mode, path_length=config.path_length, leaky_mode=config.leaky_mode,
        circuit_lifetime=config.circuit_lifetime, pool_size=config.pool_size)])
    net = await spawn_testnet(spec)
    try:
        return await run_dns_leak_test(net.gateway, net.trap, net.echo.address,
                                       connects=connects, resolves=resolves)
    finally:
        await net.close()
