"""Normal-world observer: maps run regions directly and scans raw bytes for probes.

This is the deliberate adversary path. Each scan looks at the region linearly
and, where a valid channel layout is present, at every ring's data area as a
circular buffer so that a message split by wraparound is still found.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable

from .csm import Region, read_layout
from .errors import AgenteeError, RegionUnmappable


@dataclass(frozen=True, order=True)
class Finding:
    region: str
    offset: int
    probe: bytes


def _find_all(data: bytes, probe: bytes):
    start = data.find(probe)
    while start != -1:
        yield start
        start = data.find(probe, start + 1)


def scan_bytes(name: str, raw: bytes, probes: Iterable[bytes], rings=()) -> set[Finding]:
    """Linear scan plus circular scans of ``rings`` given as (data offset, capacity)."""
    found = set()
    for probe in probes:
        if not probe:
            continue
        for off in _find_all(raw, probe):
            found.add(Finding(name, off, probe))
        for data_off, capacity in rings:
            area = raw[data_off:data_off + capacity]
            wrapped = area + area[:len(probe) - 1]
            for off in _find_all(wrapped, probe):
                found.add(Finding(name, data_off + off % capacity, probe))
    return found


def scan_region(name: str, probes: Iterable[bytes]) -> set[Finding]:
    try:
        region = Region.attach(name)
    except (FileNotFoundError, OSError, ValueError) as exc:
        raise RegionUnmappable(f"cannot map region {name}: {exc}") from exc
    try:
        raw = bytes(region.buf)
        try:
            layout = read_layout(region)
            rings = [(layout.data_offset(i), layout.capacity) for i in range(layout.channel_count)]
        except (AgenteeError, ValueError):
            rings = []
    finally:
        region.close()
    return scan_bytes(name, raw, probes, rings)


def run_observer(region_ids: Iterable[str], probe_strings: Iterable[bytes | str]) -> list[Finding]:
    """One pass over the given regions; every (region, offset, probe) hit."""
    probes = [p.encode("utf-8") if isinstance(p, str) else bytes(p) for p in probe_strings]
    found: set[Finding] = set()
    if not probes:
        return []
    for name in region_ids:
        found |= scan_region(name, probes)
    return sorted(found)


class Observer:
    """Scans continuously in a background thread for the lifetime of a run.

    ``regions`` is called on every pass so regions created later are picked up;
    regions that vanish between listing and mapping are skipped.
    """

    def __init__(self, regions: Callable[[], Iterable[str]], probe_strings: Iterable[bytes | str],
                 interval: float = 0.002):
        self.regions = regions
        self.probes = [p.encode("utf-8") if isinstance(p, str) else bytes(p) for p in probe_strings]
        self.interval = interval
        self.findings: set[Finding] = set()
        self.scanned: set[str] = set()
        self.passes = 0
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, name="observer", daemon=True)

    def scan_once(self) -> None:
        for name in list(self.regions()):
            try:
                hits = scan_region(name, self.probes)
            except RegionUnmappable:
                continue
            self.scanned.add(name)
            self.findings |= hits
        self.passes += 1

    def _run(self) -> None:
        while not self._stop.is_set():
            self.scan_once()
            self._stop.wait(self.interval)

    def start(self) -> "Observer":
        self._thread.start()
        return self

    def stop(self) -> list[Finding]:
        self._stop.set()
        self._thread.join()
        self.scan_once()
        return sorted(self.findings)

    def hits_per_probe(self) -> dict[bytes, int]:
        counts = {p: 0 for p in self.probes}
        for f in self.findings:
            counts[f.probe] += 1
        return counts
