from __future__ import annotations

import csv
import json
from pathlib import Path

from .speed import BUCKET_MBPS, SpeedReport, histogram

CSV_FIELDS = ("mode", "direction", "bytes", "elapsed", "mbps")


def text_histogram(report: SpeedReport, width: int = 40) -> str:
    lines = []
    for mode, direction in report.groups():
        rates = [s.mbps for s in report.select(mode, direction)]
        hist = histogram(rates)
        peak = max(hist.values())
        lines.append(f"{mode.value} {direction.value} (Mb/s, {BUCKET_MBPS} buckets, n={len(rates)})")
        for edge, count in hist.items():
            bar = "#" * max(1, round(count / peak * width))
            lines.append(f"  {edge:8.1f}-{edge + BUCKET_MBPS:<8.1f} {count:4d} {bar}")
    return "\n".join(lines) + "\n"


def emit_report(report: SpeedReport, prefix, formats=("csv", "json")) -> list[Path]:
    """Write ``<prefix>.csv`` / ``.json`` / ``.txt``; returns the paths written."""
    prefix = Path(prefix)
    written = []
    if "csv" in formats:
        path = prefix.with_suffix(".csv")
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_FIELDS)
            for s in report.samples:
                w.writerow((s.mode.value, s.direction.value, s.bytes, repr(s.elapsed), repr(s.mbps)))
        written.append(path)
    if "json" in formats:
        path = prefix.with_suffix(".json")
        path.write_text(json.dumps(report.summary(), indent=2) + "\n")
        written.append(path)
    if "txt" in formats:
        path = prefix.with_suffix(".txt")
        path.write_text(text_histogram(report))
        written.append(path)
    return written
