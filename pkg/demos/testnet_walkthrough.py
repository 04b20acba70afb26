"""Boot a loopback network, push bytes through the SOCKS gateway, and look inside the relays.

Run: python3 demos/testnet_walkthrough.py
"""

import asyncio
import json

from onionbox.harness import TestnetSpec, socks_connect, socks_resolve, spawn_testnet
from onionbox.link import split_address


async def main():
    async with await spawn_testnet(TestnetSpec(relays=4)) as net:
        print(json.dumps(net.topology(), indent=2))

        circuit = net.gateway.pool.ready()[0]
        print("\ngateway circuit:", " -> ".join(d.address for d in circuit.path))

        # Any SOCKS-capable application would do this; the hostname is handed to the exit as-is.
        port = split_address(net.echo.address)[1]
        reader, writer = await socks_connect(net.gateway.address, "echo.test", port)
        writer.write(b"hello through three relays")
        print("echo:", (await reader.readexactly(26)).decode())

        # Name lookups are answered by the exit's resolver, never by the gateway host.
        print("example.test resolves to", await socks_resolve(net.gateway.address, "example.test"))
        print("trap resolver hits:", len(net.trap.hits))

        # Each relay knows one key and its two neighbours, nothing more.
        for relay in net.relays:
            for state in relay.circuits.values():
                nxt = state.next_link.name if state.next_link else "(exit)"
                print(f"{relay.name}: prev={state.prev_link.name} next={nxt} keys={len(relay.session_keys())} "
                      f"exit streams={len(relay.exit_streams)}")
        writer.close()


asyncio.run(main())
