"""Upload/download throughput through a gateway, with and without onion routing."""

from __future__ import annotations

import asyncio
import enum
import logging
import math
import os
import statistics
import struct
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional, Union

from ..errors import OnionError
from ..gateway import Gateway, Mode
from ..link import split_address
from .socks import socks_connect

log = logging.getLogger(__name__)

MiB = 1 << 20
BUCKET_MBPS = 0.5
DEFAULT_SIZE = 16 * MiB
DEFAULT_REPETITIONS = 10


class Direction(str, enum.Enum):
    DOWNLOAD = "download"
    UPLOAD = "upload"


@dataclass(frozen=True)
class ThroughputSample:
    direction: Direction
    mode: Mode
    bytes: int
    elapsed: float

    @property
    def mbps(self) -> float:
        return self.bytes * 8 / self.elapsed / 1e6


def histogram(values: Iterable[float], width: float = BUCKET_MBPS) -> dict[float, int]:
    """Counts per bucket, keyed by the bucket's lower edge in Mb/s."""
    counts = Counter(math.floor(v / width) for v in values)
    return {k * width: counts[k] for k in sorted(counts)}


@dataclass
class SpeedReport:
    samples: list[ThroughputSample] = field(default_factory=list)
    failures: int = 0

    def select(self, mode: Mode, direction: Direction) -> list[ThroughputSample]:
        return [s for s in self.samples if s.mode is mode and s.direction is direction]

    def groups(self) -> list[tuple[Mode, Direction]]:
        return sorted({(s.mode, s.direction) for s in self.samples}, key=lambda k: (k[0].value, k[1].value))

    def stats(self, mode: Mode, direction: Direction) -> dict:
        rates = [s.mbps for s in self.select(mode, direction)]
        if not rates:
            raise LookupError(f"no {mode.value}/{direction.value} samples")
        return {"count": len(rates), "mean": statistics.fmean(rates), "min": min(rates), "max": max(rates),
                "histogram": histogram(rates)}

    def mean(self, mode: Mode, direction: Direction) -> float:
        return self.stats(mode, direction)["mean"]

    def overhead_ratio(self, direction: Direction) -> float:
        """mean(DIRECT) / mean(ONION) for one direction."""
        return self.mean(Mode.DIRECT, direction) / self.mean(Mode.ONION, direction)

    @classmethod
    def merge(cls, *reports: "SpeedReport") -> "SpeedReport":
        out = cls()
        for r in reports:
            out.samples.extend(r.samples)
            out.failures += r.failures
        return out

    def summary(self) -> dict:
        groups = {}
        for mode, direction in self.groups():
            st = self.stats(mode, direction)
            st["histogram"] = {f"{k:.1f}": v for k, v in st["histogram"].items()}
            groups[f"{mode.value}/{direction.value}"] = st
        ratios = {}
        for direction in Direction:
            try:
                ratios[direction.value] = self.overhead_ratio(direction)
            except LookupError:
                pass
        return {"samples": len(self.samples), "failures": self.failures, "groups": groups,
                "overhead_ratio": ratios, "units": "Mb/s (megabits per second)"}


async def _upload(proxy: str, sink: str, payload: bytes) -> float:
    host, port = split_address(sink)
    reader, writer = await socks_connect(proxy, host, port)
    try:
        start = time.perf_counter()
        writer.write(struct.pack(">Q", len(payload)))
        writer.write(payload)
        await writer.drain()
        ack = await reader.readexactly(8)
        elapsed = time.perf_counter() - start
    finally:
        writer.close()
    (counted,) = struct.unpack(">Q", ack)
    if counted != len(payload):
        raise IOError(f"sink acknowledged {counted} of {len(payload)} bytes")
    return elapsed


async def _download(proxy: str, source: str, size: int) -> float:
    host, port = split_address(source)
    reader, writer = await socks_connect(proxy, host, port)
    try:
        start = time.perf_counter()
        writer.write(struct.pack(">Q", size))
        await writer.drain()
        got = 0
        while got < size:
            data = await reader.read(256 * 1024)
            if not data:
                raise IOError(f"source closed after {got} of {size} bytes")
            got += len(data)
        elapsed = time.perf_counter() - start
    finally:
        writer.close()
    return elapsed


async def run_speed_test(gateway: Union[Gateway, str], mode: Optional[Mode], direction: Direction,
                         size_bytes: int = DEFAULT_SIZE, repetitions: int = DEFAULT_REPETITIONS, *,
                         sink: str, source: str, check_minimums: bool = True) -> SpeedReport:
    """Time ``repetitions`` transfers of ``size_bytes`` through the gateway's SOCKS port.

    Failed transfers are counted in ``failures`` and left out of the samples.
    """
    if isinstance(gateway, Gateway):
        if mode is not None and Mode(mode) is not gateway.config.mode:
            raise ValueError(f"gateway runs in {gateway.config.mode.value} mode, not {Mode(mode).value}")
        mode, proxy = gateway.config.mode, gateway.address
    else:
        if mode is None:
            raise ValueError("mode is required when passing a bare proxy address")
        mode, proxy = Mode(mode), gateway
    direction = Direction(direction)
    if check_minimums and (size_bytes < MiB or repetitions < 5):
        raise ValueError("speed tests need size >= 1 MiB and >= 5 repetitions")
    report = SpeedReport()
    payload = os.urandom(size_bytes) if direction is Direction.UPLOAD else b""
    for rep in range(repetitions):
        try:
            if direction is Direction.UPLOAD:
                elapsed = await _upload(proxy, sink, payload)
            else:
                elapsed = await _download(proxy, source, size_bytes)
        except (OSError, OnionError, asyncio.IncompleteReadError, asyncio.TimeoutError) as exc:
            log.warning("%s %s repetition %d failed: %s", mode.value, direction.value, rep, exc)
            report.failures += 1
            continue
        sample = ThroughputSample(direction, mode, size_bytes, elapsed)
        log.info("%s %s: %.2f Mb/s", mode.value, direction.value, sample.mbps)
        report.samples.append(sample)
    return report
