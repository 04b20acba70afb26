"""Name resolution backends, plus the trap resolver used to catch DNS leaks."""

from __future__ import annotations

import asyncio
import ipaddress
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional

import dns.asyncquery
import dns.exception
import dns.message
import dns.rcode
import dns.rdatatype
import dns.rrset

from .link import split_address

log = logging.getLogger(__name__)


def is_ipv4(host: str) -> bool:
    try:
        ipaddress.IPv4Address(host)
    except ValueError:
        return False
    return True


class StaticResolver:
    def __init__(self, hosts: Optional[Mapping[str, str]] = None):
        self.hosts = {k.lower().rstrip("."): v for k, v in (hosts or {"localhost": "127.0.0.1"}).items()}
        self.queries: list[str] = []

    async def resolve(self, hostname: str) -> Optional[str]:
        self.queries.append(hostname)
        if is_ipv4(hostname):
            return hostname
        return self.hosts.get(hostname.lower().rstrip("."))

    @classmethod
    def from_hosts_file(cls, path) -> "StaticResolver":
        hosts = {}
        for line in Path(path).read_text().splitlines():
            line = line.split("#", 1)[0].split()
            if len(line) >= 2 and is_ipv4(line[0]):
                for name in line[1:]:
                    hosts[name] = line[0]
        return cls(hosts)


class DnsResolver:
    """A-record lookups against one DNS server over UDP."""

    def __init__(self, server: str, timeout: float = 2.0):
        self.host, self.port = split_address(server)
        self.timeout = timeout

    async def resolve(self, hostname: str) -> Optional[str]:
        if is_ipv4(hostname):
            return hostname
        query = dns.message.make_query(hostname, dns.rdatatype.A)
        try:
            response = await dns.asyncquery.udp(query, self.host, port=self.port, timeout=self.timeout)
        except (dns.exception.DNSException, OSError) as exc:
            log.debug("lookup of %s via %s:%d failed: %s", hostname, self.host, self.port, exc)
            return None
        for rrset in response.answer:
            for rdata in rrset:
                if rdata.rdtype == dns.rdatatype.A:
                    return rdata.address
        return None


@dataclass(frozen=True)
class TrapHit:
    timestamp: float
    source: tuple[str, int]
    payload: bytes

    @property
    def qname(self) -> Optional[str]:
        try:
            return dns.message.from_wire(self.payload).question[0].name.to_text(omit_final_dot=True)
        except Exception:
            return None


class TrapResolver(asyncio.DatagramProtocol):
    """UDP listener that records every datagram it receives.

    If ``answers`` is given, A queries for those names get a real reply so that
    a leaking client still works (and keeps leaking).
    """

    def __init__(self, host: str = "127.0.0.1", port: int = 0, answers: Optional[Mapping[str, str]] = None):
        self.host = host
        self.port = port
        self.answers = {k.lower().rstrip("."): v for k, v in (answers or {}).items()}
        self.hits: list[TrapHit] = []
        self._transport: asyncio.DatagramTransport | None = None
        self._closed: Optional[asyncio.Future] = None

    @property
    def address(self) -> str:
        return f"{self.host}:{self.port}"

    async def start(self) -> "TrapResolver":
        loop = asyncio.get_running_loop()
        self._closed = loop.create_future()
        self._transport, _ = await loop.create_datagram_endpoint(lambda: self, local_addr=(self.host, self.port))
        self.port = self._transport.get_extra_info("sockname")[1]
        return self

    async def stop(self) -> None:
        if self._transport is not None:
            self._transport.close()
            self._transport = None
            # the socket is released a loop iteration later; wait so the port is re-bindable
            await self._closed

    def connection_lost(self, exc) -> None:
        if self._closed is not None and not self._closed.done():
            self._closed.set_result(None)

    def clear(self) -> None:
        self.hits.clear()

    def datagram_received(self, data: bytes, addr) -> None:
        self.hits.append(TrapHit(time.time(), addr, data))
        if not self.answers:
            return
        try:
            query = dns.message.from_wire(data)
            question = query.question[0]
        except Exception:
            return
        response = dns.message.make_response(query)
        ip = self.answers.get(question.name.to_text(omit_final_dot=True).lower())
        if ip is not None and question.rdtype == dns.rdatatype.A:
            response.answer.append(dns.rrset.from_text(question.name, 60, "IN", "A", ip))
        else:
            response.set_rcode(dns.rcode.NXDOMAIN)
        self._transport.sendto(response.to_wire(), addr)
