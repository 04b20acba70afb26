"""``onionbox`` command line: run any node type or the evaluation suite.

Exit codes: 0 success, 1 runtime error, 2 usage error, 3 leak detected (leaktest).
"""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import sys
from pathlib import Path

from .directory import DirectoryServer, parse_roles
from .errors import OnionError
from .gateway import Gateway, GatewayConfig, Mode
from .handshake import IdentityKey
from .link import split_address
from .relay import Relay
from .resolver import DnsResolver, StaticResolver

log = logging.getLogger("onionbox")

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_LEAK = 0, 1, 2, 3


def _address(value: str) -> str:
    try:
        split_address(value)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    return value


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="onionbox", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("keygen", help="write a relay identity key file (64 octets, hex)")
    s.add_argument("--out", required=True, type=Path)

    s = sub.add_parser("dir", help="run the directory node")
    s.add_argument("--listen", type=_address, default="127.0.0.1:9030")

    s = sub.add_parser("relay", help="run a relay")
    s.add_argument("--listen", type=_address, default="127.0.0.1:0")
    s.add_argument("--directory", type=_address, required=True)
    s.add_argument("--roles", default="entry,middle,exit")
    s.add_argument("--identity", type=Path, help="identity key file from `keygen` (fresh key if omitted)")
    group = s.add_mutually_exclusive_group()
    group.add_argument("--hosts-file", type=Path, help="static hosts map used when acting as exit")
    group.add_argument("--dns", type=_address, help="DNS server used when acting as exit")
    s.add_argument("--rate-mbps", type=float, help="token-bucket limit on everything this relay sends")

    s = sub.add_parser("gateway", help="run the SOCKS5 gateway")
    _gateway_flags(s)

    s = sub.add_parser("testnet", help="boot a loopback network and check a circuit comes up")
    s.add_argument("--relays", type=int, default=3)
    s.add_argument("--path-length", type=int, default=3)
    s.add_argument("--hold", action="store_true", help="keep running until interrupted")
    s.add_argument("--topology-out", type=Path, help="write component addresses as JSON")

    s = sub.add_parser("speedtest", help="measure throughput with and without onion routing")
    modes = s.add_mutually_exclusive_group()
    modes.add_argument("--both-modes", action="store_true", help="run ONION and DIRECT (default)")
    modes.add_argument("--mode", choices=[m.value for m in Mode])
    s.add_argument("--direction", choices=["download", "upload", "both"], default="both")
    s.add_argument("--size-mib", type=float, default=16)
    s.add_argument("--reps", type=int, default=10)
    s.add_argument("--relays", type=int, default=3)
    s.add_argument("--path-length", type=int, default=3)
    s.add_argument("--out", type=Path, default=Path("speedtest"), help="output prefix for .csv/.json/.txt")

    s = sub.add_parser("leaktest", help="DNS leak test; exits 3 when a leak is found")
    s.add_argument("--config", type=Path, help="gateway JSON config to test")
    s.add_argument("--mode", choices=[m.value for m in Mode])
    s.add_argument("--leaky", action="store_true", default=None)
    s.add_argument("--connects", type=int, default=100)
    s.add_argument("--resolves", type=int, default=100)
    s.add_argument("--out", type=Path, help="write the JSON verdict here")
    return p


def _gateway_flags(s: argparse.ArgumentParser) -> None:
    s.add_argument("--config", type=Path, help="JSON config; flags override its fields")
    s.add_argument("--listen", type=_address)
    s.add_argument("--directory", type=_address)
    s.add_argument("--mode", choices=[m.value for m in Mode])
    s.add_argument("--path-length", type=int)
    s.add_argument("--lifetime", type=float, help="circuit lifetime in seconds")
    s.add_argument("--host-resolver", type=_address)
    s.add_argument("--leaky", action="store_true", default=None, help="resolve locally too (tests only)")


def _gateway_config(args) -> GatewayConfig:
    overrides = {"listen_addr": args.listen, "directory_addr": args.directory, "mode": args.mode,
                 "path_length": args.path_length, "circuit_lifetime": args.lifetime,
                 "host_resolver": args.host_resolver, "leaky_mode": args.leaky}
    if args.config:
        return GatewayConfig.from_file(args.config, **overrides)
    return GatewayConfig.from_dict({k: v for k, v in overrides.items() if v is not None})


async def _forever(*stoppables) -> None:
    try:
        await asyncio.Event().wait()
    finally:
        for s in stoppables:
            await s.stop()


async def _run_dir(args) -> int:
    host, port = split_address(args.listen)
    server = await DirectoryServer(host=host, port=port).start()
    print(server.address, flush=True)
    await _forever(server)
    return EXIT_OK


async def _run_relay(args) -> int:
    host, port = split_address(args.listen)
    identity = IdentityKey.load(args.identity) if args.identity else None
    if args.hosts_file:
        resolver = StaticResolver.from_hosts_file(args.hosts_file)
    elif args.dns:
        resolver = DnsResolver(args.dns)
    else:
        resolver = StaticResolver()
    relay = await Relay(identity, host=host, port=port, roles=parse_roles(args.roles), resolver=resolver,
                        directory_addr=args.directory, rate_mbps=args.rate_mbps).start()
    print(relay.address, flush=True)
    await _forever(relay)
    return EXIT_OK


async def _run_gateway(args) -> int:
    gateway = await Gateway(_gateway_config(args)).start()
    print(gateway.address, flush=True)
    await _forever(gateway)
    return EXIT_OK


async def _run_testnet(args) -> int:
    from .harness import GatewaySpec, TestnetSpec, spawn_testnet

    spec = TestnetSpec(relays=args.relays, gateways=[GatewaySpec(path_length=args.path_length)])
    net = await spawn_testnet(spec)
    try:
        circuit = net.gateway.pool.ready()[0]
        log.info("circuit up: %r", circuit)
        topology = net.topology()
        if args.topology_out:
            args.topology_out.write_text(json.dumps(topology, indent=2) + "\n")
        print(json.dumps(topology), flush=True)
        if args.hold:
            await asyncio.Event().wait()
    finally:
        await net.close()
    return EXIT_OK


async def _run_speedtest(args) -> int:
    from .harness import Direction, GatewaySpec, SpeedReport, TestnetSpec, emit_report, run_speed_test, spawn_testnet

    modes = [Mode(args.mode)] if args.mode else [Mode.ONION, Mode.DIRECT]
    directions = list(Direction) if args.direction == "both" else [Direction(args.direction)]
    spec = TestnetSpec(relays=max(args.relays, args.path_length),
                       gateways=[GatewaySpec(mode=m, path_length=args.path_length) for m in modes])
    net = await spawn_testnet(spec)
    reports = []
    try:
        for mode in modes:
            for direction in directions:
                reports.append(await run_speed_test(net.gateway_for(mode), mode, direction,
                                                    int(args.size_mib * (1 << 20)), args.reps,
                                                    sink=net.sink.address, source=net.source.address))
    finally:
        await net.close()
    report = SpeedReport.merge(*reports)
    for path in emit_report(report, args.out, ("csv", "json", "txt")):
        print(path)
    print(json.dumps(report.summary()["overhead_ratio"]))
    return EXIT_OK if not report.failures else EXIT_ERROR


async def _run_leaktest(args) -> int:
    from .harness import Verdict, leak_test_for_config

    if args.config:
        config = GatewayConfig.from_file(args.config, mode=args.mode, leaky_mode=args.leaky,
                                         directory_addr="127.0.0.1:0")
    else:
        config = GatewayConfig(directory_addr="127.0.0.1:0", mode=args.mode or Mode.ONION,
                               leaky_mode=bool(args.leaky))
    report = await leak_test_for_config(config, connects=args.connects, resolves=args.resolves)
    summary = report.summary()
    if args.out:
        args.out.write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))
    return EXIT_LEAK if report.verdict is Verdict.LEAK else EXIT_OK


def _keygen(args) -> int:
    IdentityKey.generate().save(args.out)
    print(args.out)
    return EXIT_OK


_COMMANDS = {"dir": _run_dir, "relay": _run_relay, "gateway": _run_gateway, "testnet": _run_testnet,
             "speedtest": _run_speedtest, "leaktest": _run_leaktest}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=max(logging.DEBUG, logging.WARNING - 10 * args.verbose),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        if args.command == "keygen":
            return _keygen(args)
        return asyncio.run(_COMMANDS[args.command](args))
    except KeyboardInterrupt:
        return EXIT_OK
    except (OnionError, OSError, ValueError) as exc:
        print(f"onionbox {args.command}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
