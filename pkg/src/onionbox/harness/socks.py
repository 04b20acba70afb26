"""Minimal SOCKS5 client used to drive the gateway like an ordinary application."""

from __future__ import annotations

import asyncio
import ipaddress
import struct

from ..errors import OnionError
from ..link import split_address
from ..resolver import is_ipv4


class SocksError(OnionError):
    def __init__(self, code: int):
        super().__init__(f"SOCKS request failed with reply {code:#04x}")
        self.code = code


def _address(host: str) -> bytes:
    if is_ipv4(host):
        return b"\x01" + ipaddress.IPv4Address(host).packed
    raw = host.encode("idna")
    return b"\x03" + bytes((len(raw),)) + raw


async def _request(proxy: str, cmd: int, host: str, port: int, timeout: float):
    phost, pport = split_address(proxy)
    reader, writer = await asyncio.wait_for(asyncio.open_connection(phost, pport), timeout)
    try:
        writer.write(b"\x05\x01\x00")
        if await asyncio.wait_for(reader.readexactly(2), timeout) != b"\x05\x00":
            raise SocksError(0xFF)
        writer.write(b"\x05" + bytes((cmd,)) + b"\x00" + _address(host) + struct.pack(">H", port))
        reply = await asyncio.wait_for(reader.readexactly(10), timeout)
    except BaseException:
        writer.close()
        raise
    if reply[1] != 0:
        writer.close()
        raise SocksError(reply[1])
    return reader, writer, str(ipaddress.IPv4Address(reply[4:8]))


async def socks_connect(proxy: str, host: str, port: int, timeout: float = 15.0):
    """Open a proxied connection; returns ``(reader, writer)``."""
    reader, writer, _ = await _request(proxy, 0x01, host, port, timeout)
    return reader, writer


async def socks_resolve(proxy: str, hostname: str, timeout: float = 15.0) -> str:
    """Tor-style SOCKS RESOLVE (command 0xF0)."""
    _, writer, ip = await _request(proxy, 0xF0, hostname, 0, timeout)
    writer.close()
    return ip
