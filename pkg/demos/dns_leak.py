"""DNS leak test against three gateway configurations.

A trap resolver stands in for the local/ISP resolver.  Anything that reaches it is a leak.
Run: python3 demos/dns_leak.py
"""

import asyncio

from onionbox.gateway import Mode
from onionbox.harness import GatewaySpec, TestnetSpec, run_dns_leak_test, spawn_testnet

CONFIGS = [("onion", GatewaySpec()), ("onion, leaky", GatewaySpec(leaky_mode=True)),
           ("direct", GatewaySpec(mode=Mode.DIRECT))]


async def main():
    spec = TestnetSpec(relays=3, gateways=[g for _, g in CONFIGS])
    async with await spawn_testnet(spec) as net:
        for (label, _), gateway in zip(CONFIGS, net.gateways):
            report = await run_dns_leak_test(gateway, net.trap, net.echo.address, connects=100, resolves=100)
            s = report.summary()
            print(f"{label:14s} {s['verdict']:8s} trap hits={s['trap_hits']:4d} names={s['queried_names']}")


asyncio.run(main())
