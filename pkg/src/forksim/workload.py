"""Open-loop query streams: fixed-rate arrivals, exact SET/GET mix, uniform or Gaussian keys."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np


class QueryKind(str, Enum):
    SET = "SET"
    GET = "GET"


class KeyDist(str, Enum):
    UNIFORM = "uniform"
    GAUSSIAN = "gaussian"


@dataclass(frozen=True)
class WorkloadSpec:
    rate: float = 50_000.0  # queries per second
    set_get_ratio: tuple[int, int] = (1, 0)
    key_space: int = 1 << 16
    key_dist: KeyDist = KeyDist.UNIFORM
    key_mean: float | None = None  # Gaussian only; default key_space / 2
    key_stddev: float | None = None  # Gaussian only; default key_space / 6
    value_bytes: int = 8
    clients: int = 1
    total_queries: int = 10_000
    seed: int = 0
    arrivals: str = "fixed"  # or "poisson"
    start_ns: int = 0

    def __post_init__(self):
        object.__setattr__(self, "key_dist", KeyDist(self.key_dist))
        object.__setattr__(self, "set_get_ratio", tuple(self.set_get_ratio))
        s, g = self.set_get_ratio
        if not self.rate > 0:
            raise ValueError("rate must be positive")
        if s < 0 or g < 0 or s + g <= 0:
            raise ValueError("set_get_ratio needs non-negative parts with a positive sum")
        if self.key_space <= 0 or self.value_bytes <= 0 or self.clients <= 0 or self.total_queries < 0:
            raise ValueError("key_space, value_bytes and clients must be positive")
        if self.arrivals not in ("fixed", "poisson"):
            raise ValueError("arrivals must be 'fixed' or 'poisson'")
        if self.key_stddev is not None and not self.key_stddev > 0:
            raise ValueError("key_stddev must be positive")

    @property
    def interarrival_ns(self) -> float:
        return 1e9 / self.rate


@dataclass
class QueryStream:
    """Column-wise arrival stream; row i is query id i."""

    times: np.ndarray  # int64 ns
    is_set: np.ndarray  # bool
    keys: np.ndarray  # int64
    clients: np.ndarray  # int32

    def __len__(self):
        return len(self.times)

    def __iter__(self):
        for i in range(len(self)):
            yield (int(self.times[i]), QueryKind.SET if self.is_set[i] else QueryKind.GET,
                   int(self.keys[i]), int(self.clients[i]))

    def set_fraction(self) -> float:
        return float(self.is_set.mean()) if len(self) else 0.0


def generate(spec: WorkloadSpec) -> QueryStream:
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    n = spec.total_queries
    if spec.arrivals == "fixed":
        times = spec.start_ns + np.round(np.arange(n) * spec.interarrival_ns).astype(np.int64)
    else:
        gaps = rng.exponential(spec.interarrival_ns, n)
        times = spec.start_ns + np.round(np.cumsum(gaps) - gaps[0] if n else gaps).astype(np.int64)
    s, g = spec.set_get_ratio
    n_set = int(round(n * s / (s + g)))
    is_set = np.zeros(n, dtype=bool)
    is_set[:n_set] = True
    rng.shuffle(is_set)
    if spec.key_dist == KeyDist.UNIFORM:
        keys = rng.integers(0, spec.key_space, n, dtype=np.int64)
    else:
        mean = spec.key_space / 2 if spec.key_mean is None else spec.key_mean
        sd = spec.key_space / 6 if spec.key_stddev is None else spec.key_stddev
        keys = np.clip(np.floor(rng.normal(mean, sd, n)), 0, spec.key_space - 1).astype(np.int64)
    clients = (np.arange(n) % spec.clients).astype(np.int32)
    return QueryStream(times, is_set, keys, clients)
