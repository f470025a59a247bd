"""Latency percentiles, throughput windows, interruption histograms and out-of-service totals."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable

import numpy as np

from .sim_clock import Cause, Episode


class QueryClass(str, Enum):
    NORMAL = "normal"
    SNAPSHOT = "snapshot"


@dataclass(frozen=True)
class LatencyRecord:
    query_id: int
    cls: QueryClass
    arrival_ns: int
    latency_ns: int


def percentile(values, p: float) -> int:
    """Nearest-rank percentile: the ceil(p*n)-th smallest value; p=1 is the max."""
    if not 0 < p <= 1:
        raise ValueError("p must be in (0, 1]")
    v = np.sort(np.asarray(values))
    if not len(v):
        raise ValueError("percentile of an empty class")
    rank = max(1, math.ceil(round(p * len(v), 9)))
    return int(v[rank - 1])


def bucket_of(duration_ns: int) -> tuple[int, int]:
    """Power-of-two microsecond bucket [2^k, 2^(k+1)-1]; sub-microsecond goes to (0, 0)."""
    us = int(duration_ns) // 1000
    if us <= 0:
        return (0, 0)
    k = us.bit_length() - 1
    return (1 << k, (1 << (k + 1)) - 1)


def interruption_histogram(durations_ns: Iterable[int], min_buckets: int = 12) -> dict[tuple[int, int], int]:
    """Counts per bucket, in ascending order, with every bucket up to the largest present."""
    durations = list(durations_ns)
    top = max((bucket_of(d)[0] for d in durations), default=0)
    kmax = max(min_buckets - 1, top.bit_length() - 1)
    hist = {(0, 0): 0}
    for k in range(kmax + 1):
        hist[(1 << k, (1 << (k + 1)) - 1)] = 0
    for d in durations:
        hist[bucket_of(d)] += 1
    return hist


def throughput_series(completions_ns, window_ns: int, t_end: int | None = None) -> list[tuple[int, int]]:
    """Completed-query counts per window, windows starting at 0 and covering the run."""
    if window_ns <= 0:
        raise ValueError("window must be positive")
    c = np.asarray(completions_ns, dtype=np.int64)
    last = max(int(c.max()) if len(c) else 0, t_end or 0)
    n = last // window_ns + 1
    counts = np.bincount(c // window_ns, minlength=n) if len(c) else np.zeros(n, np.int64)
    return [(i * window_ns, int(counts[i])) for i in range(n)]


def out_of_service_total(episodes: Iterable[Episode], causes: Iterable[Cause] | None = None) -> int:
    wanted = None if causes is None else {Cause(c) for c in causes}
    return sum(e.duration for e in episodes if wanted is None or e.cause in wanted)


@dataclass
class InterruptionLog:
    entries: list[Episode] = field(default_factory=list)

    def add(self, ep: Episode) -> None:
        if ep.duration <= 0:
            raise ValueError("interruption must have positive duration")
        self.entries.append(ep)

    def ordered(self) -> list[Episode]:
        return sorted(self.entries, key=lambda e: e.start)

    def select(self, causes: Iterable[Cause] | None = None) -> list[Episode]:
        wanted = None if causes is None else {Cause(c) for c in causes}
        return [e for e in self.ordered() if wanted is None or e.cause in wanted]

    def count(self, causes: Iterable[Cause] | None = None) -> int:
        return len(self.select(causes))

    def histogram(self, causes: Iterable[Cause] | None = None) -> dict[tuple[int, int], int]:
        return interruption_histogram(e.duration for e in self.select(causes))

    def total(self, causes: Iterable[Cause] | None = None) -> int:
        return out_of_service_total(self.entries, causes)


class LatencyLog:
    """Per-query latencies split into normal and snapshot classes."""

    def __init__(self, records: Iterable[LatencyRecord] = ()):
        self.records = sorted(records, key=lambda r: r.query_id)

    def add(self, rec: LatencyRecord) -> None:
        self.records.append(rec)

    def latencies(self, cls: QueryClass | str | None = None) -> np.ndarray:
        want = None if cls is None else QueryClass(cls)
        return np.array([r.latency_ns for r in self.records if want is None or r.cls == want], dtype=np.int64)

    def percentile(self, cls: QueryClass | str, p: float) -> int:
        return percentile(self.latencies(cls), p)

    def count(self, cls: QueryClass | str | None = None) -> int:
        return len(self.latencies(cls))
