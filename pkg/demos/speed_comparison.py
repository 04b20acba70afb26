"""Throughput with and without onion routing on loopback, plus a throttled relay.

Run: python3 demos/speed_comparison.py [size_mib] [reps]
The defaults are small; the CLI's `speedtest` runs the full 16 MiB x 10 suite.
"""

import asyncio
import sys

from onionbox.gateway import Mode
from onionbox.harness import (Direction, GatewaySpec, RelaySpec, SpeedReport, TestnetSpec, run_speed_test,
                              spawn_testnet, text_histogram)
from onionbox.harness.speed import MiB


async def measure(net, modes, size, reps):
    reports = []
    for mode in modes:
        for direction in Direction:
            reports.append(await run_speed_test(net.gateway_for(mode), mode, direction, size, reps,
                                                sink=net.sink.address, source=net.source.address))
    return SpeedReport.merge(*reports)


async def main(size_mib=1.0, reps=5):
    size = int(size_mib * MiB)
    spec = TestnetSpec(relays=3, gateways=[GatewaySpec(), GatewaySpec(mode=Mode.DIRECT)])
    async with await spawn_testnet(spec) as net:
        report = await measure(net, list(Mode), size, reps)
    print(text_histogram(report))
    for direction in Direction:
        print(f"{direction.value}: onion {report.mean(Mode.ONION, direction):.1f} Mb/s, "
              f"direct {report.mean(Mode.DIRECT, direction):.1f} Mb/s, "
              f"overhead x{report.overhead_ratio(direction):.1f}")

    # A chain moves no faster than its slowest relay.
    spec = TestnetSpec(relays=[RelaySpec(), RelaySpec(rate_mbps=2.0), RelaySpec()])
    async with await spawn_testnet(spec) as net:
        shaped = await measure(net, [Mode.ONION], MiB, 5)
    for direction in Direction:
        print(f"one relay at 2 Mb/s, {direction.value}: {shaped.mean(Mode.ONION, direction):.2f} Mb/s")


asyncio.run(main(*(float(a) for a in sys.argv[1:2]), *(int(a) for a in sys.argv[2:3])))
