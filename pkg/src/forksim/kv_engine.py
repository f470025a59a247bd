"""A toy key-value store whose values live in simulated pages.

Keys are non-negative integers.  The index (key -> page, offset, length) is a
set of numpy arrays kept in host memory; only the values are stored in the
simulated heap, so every SET goes through the page-fault and checkpoint
machinery while GETs are plain reads.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .vm_core import FaultOutcome, OutOfPhysMem, Process, World

_DUMP_MAGIC = b"FKSD"
_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


class KeyNotFound(KeyError):
    pass


class HeapExhausted(OutOfPhysMem):
    pass


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = (x + np.uint64(0x9E3779B97F4A7C15)) & _MASK64
    z = x
    z = ((z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _MASK64
    z = ((z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _MASK64
    return z ^ (z >> np.uint64(31))


def make_values(keys, version, length: int) -> np.ndarray:
    """Deterministic pseudo-random value bytes, one row per key."""
    keys = np.atleast_1d(np.asarray(keys, dtype=np.uint64))
    ver = np.broadcast_to(np.asarray(version, dtype=np.uint64), keys.shape)
    words = -(-length // 8)
    with np.errstate(over="ignore"):
        base = (keys << np.uint64(24)) ^ ver
        cols = [_splitmix64(base * np.uint64(words) + np.uint64(j)) for j in range(words)]
    raw = np.stack(cols, axis=1).astype("<u8").view(np.uint8).reshape(len(keys), words * 8)
    return raw[:, :length]


_M64 = (1 << 64) - 1


def _mix(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _M64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _M64
    return x ^ (x >> 31)


def make_value(key: int, version: int, length: int) -> bytes:
    """Scalar twin of :func:`make_values` (same bytes, no numpy overhead)."""
    words = -(-length // 8)
    base = ((key << 24) ^ version) & _M64
    raw = b"".join(_mix((base * words + j) & _M64).to_bytes(8, "little") for j in range(words))
    return raw[:length]


@dataclass
class KvIndex:
    """Frozen copy of the index, used to decode a page image."""

    vpage: np.ndarray
    offset: np.ndarray
    length: np.ndarray

    def keys(self) -> np.ndarray:
        return np.flatnonzero(self.vpage >= 0)


class KvStore:
    """Bump-allocated values in ``[heap_start, heap_end)`` of ``proc``'s address space."""

    def __init__(self, world: World, proc: Process, heap_start: int, heap_end: int, key_capacity: int):
        if heap_end <= heap_start or key_capacity < 0:
            raise ValueError("empty heap or negative key space")
        self.world, self.proc = world, proc
        self.heap_start, self.heap_end = heap_start, heap_end
        self.vpage = np.full(key_capacity, -1, dtype=np.int64)
        self.offset = np.zeros(key_capacity, dtype=np.int32)
        self.length = np.zeros(key_capacity, dtype=np.int32)
        self.slot = np.zeros(key_capacity, dtype=np.int32)  # allocated bytes
        self._page = heap_start
        self._off = 0

    @property
    def payload(self) -> int:
        return self.world.payload_bytes

    def __len__(self):
        return int((self.vpage >= 0).sum())

    def __contains__(self, key: int) -> bool:
        return 0 <= key < len(self.vpage) and self.vpage[key] >= 0

    def _alloc(self, n: int) -> tuple[int, int]:
        if n > self.payload:
            raise ValueError(f"value of {n} bytes exceeds the {self.payload}-byte page payload")
        if self._off + n > self.payload:
            self._page += 1  # pad: values never straddle a page
            self._off = 0
        if self._page >= self.heap_end:
            raise HeapExhausted("KV heap exhausted")
        at = (self._page, self._off)
        self._off += n
        return at

    def kv_set(self, key: int, value: bytes) -> FaultOutcome:
        if not 0 <= key < len(self.vpage):
            raise KeyError(f"key {key} outside key space")
        if self.vpage[key] < 0 or len(value) > self.slot[key]:
            page, off = self._alloc(len(value))
            self.vpage[key], self.offset[key], self.slot[key] = page, off, len(value)
        self.length[key] = len(value)
        return self.world.write(self.proc, int(self.vpage[key]), value, int(self.offset[key]))

    def kv_get(self, key: int) -> bytes:
        if key not in self:
            raise KeyNotFound(key)
        off, n = int(self.offset[key]), int(self.length[key])
        return self.world.read(self.proc, int(self.vpage[key]))[off : off + n]

    def load(self, keys: np.ndarray, value_len: int, version: int = 0) -> None:
        """Insert many fresh keys at once (initial population, before any fork)."""
        keys = np.asarray(keys, dtype=np.int64)
        if (self.vpage[keys] >= 0).any():
            raise ValueError("bulk load of existing keys")
        per_page = self.payload // value_len
        if per_page == 0:
            raise ValueError("value longer than page payload")
        if self._off:
            self._page, self._off = self._page + 1, 0
        n = len(keys)
        pos = np.arange(n)
        pages = self._page + pos // per_page
        if n and pages[-1] >= self.heap_end:
            raise HeapExhausted("KV heap exhausted")
        offs = (pos % per_page) * value_len
        self.vpage[keys], self.offset[keys] = pages, offs
        self.length[keys] = self.slot[keys] = value_len
        self.world.write_bulk(self.proc, pages, offs, make_values(keys, version, value_len))
        last = n - 1
        self._page = int(pages[last]) if n else self._page
        self._off = int(offs[last]) + value_len if n else self._off

    def index_copy(self) -> KvIndex:
        return KvIndex(self.vpage.copy(), self.offset.copy(), self.length.copy())

    def oracle_snapshot(self) -> dict[int, bytes]:
        """Instant deep copy of the current contents, read by table walk (outside the cost model)."""
        idx = self.index_copy()
        vp = np.unique(idx.vpage[idx.vpage >= 0])
        return decode(idx, vp, self.world.image(self.proc, vp))


def decode(index: KvIndex, vpages: np.ndarray, rows: np.ndarray) -> dict[int, bytes]:
    """key -> value map from a page image, sorted by key."""
    out = {}
    keys = index.keys()
    if not len(keys):
        return out
    pos = np.searchsorted(vpages, index.vpage[keys])
    ok = (pos < len(vpages)) & (vpages[np.minimum(pos, len(vpages) - 1)] == index.vpage[keys]) if len(vpages) \
        else np.zeros(len(keys), bool)
    for k, p, good in zip(keys.tolist(), pos.tolist(), ok.tolist()):
        if not good:
            continue
        off, n = int(index.offset[k]), int(index.length[k])
        out[k] = rows[p, off : off + n].tobytes()
    return out


def snapshot_dump(session) -> dict[int, bytes]:
    """Decode a finished session's persisted image with the index captured at fork."""
    index = session.meta.get("kv_index")
    if index is None or session.dump_rows is None:
        raise ValueError("session has no persisted KV image")
    return decode(index, session.persist_vpages, session.dump_rows)


def dump_binary(dump: dict[int, bytes]) -> bytes:
    """``FKSD`` + count, then (u64 key, u32 length, bytes) per key in key order."""
    parts = [_DUMP_MAGIC, struct.pack("<Q", len(dump))]
    for k in sorted(dump):
        v = dump[k]
        parts.append(struct.pack("<QI", k, len(v)))
        parts.append(v)
    return b"".join(parts)


def load_binary(blob: bytes) -> dict[int, bytes]:
    if blob[:4] != _DUMP_MAGIC:
        raise ValueError("not a dump")
    (n,), pos, out = struct.unpack_from("<Q", blob, 4), 12, {}
    for _ in range(n):
        k, ln = struct.unpack_from("<QI", blob, pos)
        pos += 12
        out[k] = blob[pos : pos + ln]
        pos += ln
    if pos != len(blob):
        raise ValueError("trailing bytes in dump")
    return out


def dump_json(dump: dict[int, bytes]) -> str:
    return json.dumps({str(k): dump[k].hex() for k in sorted(dump)}, indent=1)
