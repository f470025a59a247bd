"""Physical memory, 4-level page tables, VMAs, TLBs and the PTE-mutating OS operations.

All entry tables of every process live in one :class:`TableStore` so that a
PTE table can be shared between processes (the ODF baseline).  Rows are 512
slots wide at every level; a slot holds a child table id (PGD/PUD/PMD) or a
physical page id (PTE), with ``-1`` meaning empty.

Virtual pages are 4 KiB-granular indices.  Bits 27..35 select the PGD entry,
18..26 the PUD entry, 9..17 the PMD entry and 0..8 the PTE.  The page payload
is a short byte vector (``payload_bytes``) so that an 8 GiB address-space shape
costs megabytes, not gigabytes.
"""
from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable

import numpy as np

from .sim_clock import PTES_PER_TABLE, Cause, CostModel, ManualClock, Trace

PAGE_BYTES = 4096
ENTRIES = PTES_PER_TABLE
PGD, PUD, PMD, PTE = 0, 1, 2, 3
LEVEL_NAMES = ("PGD", "PUD", "PMD", "PTE")
_SHIFTS = (27, 18)  # PGD, PUD index shifts; PMD is 9, PTE is 0


class VmError(Exception):
    pass


class OutOfPhysMem(VmError, MemoryError):
    pass


class UnmappedAddress(VmError, LookupError):
    pass


def table_shape(mem_bytes: int, page_bytes: int = PAGE_BYTES) -> tuple[int, int, int, int]:
    """Entries used at each level to map ``mem_bytes`` contiguously from address 0."""
    if page_bytes <= 0 or mem_bytes <= 0 or mem_bytes % page_bytes:
        raise ValueError(f"{mem_bytes} is not a positive multiple of page size {page_bytes}")
    pte = mem_bytes // page_bytes
    pmd = -(-pte // ENTRIES)
    pud = -(-pmd // ENTRIES)
    pgd = -(-pud // ENTRIES)
    return pgd, pud, pmd, pte


def pmd_of(vpage: int) -> int:
    """Address-space-wide PMD entry number covering ``vpage``."""
    return vpage >> 9


class PhysMem:
    """Refcounted physical pages with a LIFO free list.

    Freed pages keep their stale payload until reallocated; a stale TLB entry
    pointing at a recycled frame is exactly how a leak shows up.
    """

    def __init__(self, n_pages: int, payload_bytes: int = 64):
        if n_pages <= 0 or payload_bytes <= 0:
            raise ValueError("need at least one page and one payload byte")
        self.payload_bytes = payload_bytes
        self.payload = np.zeros((n_pages, payload_bytes), dtype=np.uint8)
        self.refcount = np.zeros(n_pages, dtype=np.int32)
        self._free = np.arange(n_pages - 1, -1, -1, dtype=np.int64)
        self._top = n_pages

    def __len__(self):
        return len(self.refcount)

    @property
    def free_count(self) -> int:
        return self._top

    @property
    def free_list(self) -> list[int]:
        """Free pages in pop order."""
        return self._free[: self._top][::-1].tolist()

    def alloc(self) -> int:
        if self._top == 0:
            raise OutOfPhysMem("physical free list exhausted")
        self._top -= 1
        p = int(self._free[self._top])
        self.refcount[p] = 1
        return p

    def alloc_many(self, n: int) -> np.ndarray:
        if n > self._top:
            raise OutOfPhysMem(f"need {n} pages, {self._top} free")
        pages = self._free[self._top - n : self._top][::-1].copy()
        self._top -= n
        self.refcount[pages] = 1
        return pages

    def take(self, p: int) -> int:
        """Allocate a specific free page (used when a caller names the migration target)."""
        live = self._free[: self._top]
        hit = np.flatnonzero(live == p)
        if not len(hit):
            raise ValueError(f"page {p} is not free")
        i = int(hit[0])
        self._free[i : self._top - 1] = self._free[i + 1 : self._top].copy()
        self._top -= 1
        self.refcount[p] = 1
        return p

    def get(self, p: int, n: int = 1) -> None:
        self.refcount[p] += n

    def put(self, p: int, n: int = 1) -> None:
        rc = int(self.refcount[p]) - n
        if rc < 0:
            raise VmError(f"refcount underflow on page {p}")
        self.refcount[p] = rc
        if rc == 0:
            self._push(np.array([p], dtype=np.int64))

    def _bump(self, pages: np.ndarray, delta: int, distinct: bool = False) -> np.ndarray | None:
        """Add ``delta`` per occurrence; returns the distinct pages touched when cheap to know."""
        if len(pages) > 4096:
            counts = np.bincount(pages, minlength=len(self.refcount))
            self.refcount += (delta * counts).astype(np.int32)
            return np.flatnonzero(counts)
        if distinct or len(np.unique(pages)) == len(pages):
            self.refcount[pages] += delta
            return None
        np.add.at(self.refcount, pages, delta)
        return None

    def get_many(self, pages: np.ndarray, distinct: bool = False) -> None:
        """``distinct``: caller guarantees no page repeats (e.g. one PTE table's frames)."""
        self._bump(pages, 1, distinct)

    def put_many(self, pages: np.ndarray) -> None:
        if not len(pages):
            return
        touched = self._bump(pages, -1)
        if touched is None:
            touched = np.unique(pages)
        rc = self.refcount[touched]
        if (rc < 0).any():
            raise VmError("refcount underflow")
        dead = touched[rc == 0]
        # highest id pushed first so the lowest dead page is reused first
        self._push(dead[::-1])

    def _push(self, pages: np.ndarray) -> None:
        n = len(pages)
        self._free[self._top : self._top + n] = pages
        self._top += n


class TableStore:
    """Arena of 512-slot entry tables for every process in a world."""

    def __init__(self, capacity: int = 64, limit: int | None = None):
        capacity = max(int(capacity), 8)
        self.level = np.full(capacity, -1, dtype=np.int8)
        self.ent = np.full((capacity, ENTRIES), -1, dtype=np.int32)
        self.wr = np.zeros((capacity, ENTRIES), dtype=bool)
        self.pres = np.zeros((capacity, ENTRIES), dtype=bool)
        self.sharers = np.zeros(capacity, dtype=np.int32)
        self._freed: list[int] = []
        self._next = 0
        self.live = 0
        self.limit = limit

    def _grow(self, need: int) -> None:
        cap = len(self.level)
        if need <= cap:
            return
        new = max(need, cap * 2)
        extra = new - cap
        self.level = np.concatenate([self.level, np.full(extra, -1, np.int8)])
        self.ent = np.concatenate([self.ent, np.full((extra, ENTRIES), -1, np.int32)])
        self.wr = np.concatenate([self.wr, np.zeros((extra, ENTRIES), bool)])
        self.pres = np.concatenate([self.pres, np.zeros((extra, ENTRIES), bool)])
        self.sharers = np.concatenate([self.sharers, np.zeros(extra, np.int32)])

    def _check_limit(self, n: int) -> None:
        if self.limit is not None and self.live + n > self.limit:
            raise OutOfPhysMem("no memory for a new page table")

    def alloc(self, level: int) -> int:
        self._check_limit(1)
        if self._freed:
            t = self._freed.pop()
        else:
            self._grow(self._next + 1)
            t = self._next
            self._next += 1
        self.level[t] = level
        self.sharers[t] = 1
        self.live += 1
        return t

    def alloc_many(self, level: int, n: int) -> np.ndarray:
        self._check_limit(n)
        reuse = [self._freed.pop() for _ in range(min(n, len(self._freed)))]
        fresh = n - len(reuse)
        self._grow(self._next + fresh)
        ids = np.array(reuse + list(range(self._next, self._next + fresh)), dtype=np.int64)
        self._next += fresh
        self.level[ids] = level
        self.sharers[ids] = 1
        self.live += n
        return ids

    def free_many(self, ids: np.ndarray) -> None:
        ids = np.asarray(ids, dtype=np.int64)
        self.level[ids] = -1
        self.ent[ids] = -1
        self.wr[ids] = False
        self.pres[ids] = False
        self.sharers[ids] = 0
        self._freed.extend(ids.tolist())
        self.live -= len(ids)

    def free(self, t: int) -> None:
        self.level[t] = -1
        self.ent[t] = -1
        self.wr[t] = False
        self.pres[t] = False
        self.sharers[t] = 0
        self._freed.append(int(t))
        self.live -= 1


@dataclass(eq=False)
class PeerLink:
    """Two-way VMA association between an Async parent and its copying child."""

    linked_pid: int | None = None
    error_code: str | None = None
    claimed_by: int | None = None

    def clear(self) -> None:
        self.linked_pid = None


@dataclass(eq=False)
class Vma:
    start: int
    end: int
    peer: PeerLink = field(default_factory=PeerLink)

    def __len__(self):
        return self.end - self.start

    def pmd_range(self) -> range:
        return range(pmd_of(self.start), pmd_of(self.end - 1) + 1)


@dataclass(eq=False)
class Process:
    pid: int
    pgd: int
    vmas: list[Vma] = field(default_factory=list)
    tlb: dict[int, int] = field(default_factory=dict)
    alive: bool = True

    def find_vma(self, vpage: int) -> Vma | None:
        i = bisect.bisect_right(self.vmas, vpage, key=lambda v: v.start) - 1
        if i >= 0 and self.vmas[i].start <= vpage < self.vmas[i].end:
            return self.vmas[i]
        return None

    def mapped_pages(self) -> int:
        return sum(len(v) for v in self.vmas)


class CheckpointOp(str, Enum):
    UNMAP = "Unmap"
    PROTECT = "Protect"
    MERGE = "Merge"
    SPLIT = "Split"
    PAGE_FAULT = "PageFault"
    OOM_RECLAIM = "OomReclaim"
    GET_USER_PAGE = "GetUserPage"
    MIGRATE = "Migrate"


VMA_WIDE_OPS = frozenset({CheckpointOp.UNMAP, CheckpointOp.PROTECT, CheckpointOp.MERGE, CheckpointOp.SPLIT})


@dataclass(frozen=True)
class CheckpointEvent:
    """A PTE-mutating operation about to run in a process."""

    op: CheckpointOp
    start: int
    end: int

    @property
    def vma_wide(self) -> bool:
        return self.op in VMA_WIDE_OPS

    @property
    def kind(self) -> str:
        return "VmaWide" if self.vma_wide else "PmdWide"

    def pmds(self) -> range:
        return range(pmd_of(self.start), pmd_of(self.end - 1) + 1)

    @classmethod
    def pmd_wide(cls, op: CheckpointOp, vpage: int) -> "CheckpointEvent":
        if op in VMA_WIDE_OPS:
            raise ValueError(f"{op} is VMA-wide")
        return cls(op, vpage, vpage + 1)

    @classmethod
    def vma_wide_event(cls, op: CheckpointOp, start: int, end: int) -> "CheckpointEvent":
        if op not in VMA_WIDE_OPS:
            raise ValueError(f"{op} is PMD-wide")
        return cls(op, start, end)


@dataclass
class FaultOutcome:
    kind: str  # "in_place" | "cow" | "reuse"
    syncs: int = 0
    odf_copies: int = 0
    kernel_ns: int = 0


class World:
    """Every process, their tables and the physical memory they share."""

    def __init__(self, n_phys_pages: int, payload_bytes: int = 64, cost: CostModel | None = None,
                 clock=None, table_capacity: int = 64, trace: Trace | None = None):
        self.phys = PhysMem(n_phys_pages, payload_bytes)
        self.tables = TableStore(table_capacity)
        self.cost = cost or CostModel()
        self.clock = clock if clock is not None else ManualClock()
        self.trace = trace if trace is not None else Trace()
        self.procs: dict[int, Process] = {}
        self._next_pid = 1
        self.sessions: list = []  # active Async sessions, see fork_engines
        self.persisting: list = []  # sessions whose persist task holds captured frames
        self.detector: list[tuple[int, int]] = []
        self.shared_migrations: list[tuple[int, int]] = []
        self.stale_possible = False

    # -- plumbing -----------------------------------------------------------
    @property
    def now(self) -> int:
        return self.clock.now

    @property
    def payload_bytes(self) -> int:
        return self.phys.payload_bytes

    def charge(self, pid: int, duration: int, cause: Cause) -> int:
        if duration > 0:
            self.clock.charge_kernel(pid, duration, cause)
        return duration

    def spawn(self) -> Process:
        pid = self._next_pid
        self._next_pid += 1
        proc = Process(pid, self.tables.alloc(PGD))
        self.procs[pid] = proc
        return proc

    def add_vma(self, proc: Process, start: int, end: int) -> Vma:
        if not 0 <= start < end:
            raise ValueError("empty or negative VMA")
        for v in proc.vmas:
            if start < v.end and v.start < end:
                raise ValueError(f"VMA [{start},{end}) overlaps [{v.start},{v.end})")
        vma = Vma(start, end)
        bisect.insort(proc.vmas, vma, key=lambda v: v.start)
        return vma

    def _covering_vma(self, proc: Process, vpage: int) -> Vma:
        vma = proc.find_vma(vpage)
        if vma is None:
            raise UnmappedAddress(f"pid {proc.pid}: no VMA covers vpage {vpage:#x}")
        return vma

    # -- walks --------------------------------------------------------------
    def pmd_slot(self, proc: Process, vpage: int, create: bool = False) -> tuple[int, int] | None:
        """(PMD table, index) holding the entry for ``vpage``."""
        ent, t = self.tables.ent, proc.pgd
        for level, shift in ((PGD, 27), (PUD, 18)):
            i = (vpage >> shift) & 511
            nt = int(ent[t, i])
            if nt < 0:
                if not create:
                    return None
                nt = self.tables.alloc(level + 1)
                ent[t, i] = nt
                self.tables.wr[t, i] = True
            t = nt
        return t, (vpage >> 9) & 511

    def pte_table(self, proc: Process, vpage: int) -> int | None:
        slot = self.pmd_slot(proc, vpage)
        if slot is None:
            return None
        t = int(self.tables.ent[slot])
        return t if t >= 0 else None

    def walk(self, proc: Process, vpage: int) -> int | None:
        """Physical page mapped at ``vpage`` by a full table walk, or None."""
        t = self.pte_table(proc, vpage)
        if t is None:
            return None
        i = vpage & 511
        if not self.tables.pres[t, i]:
            return None
        return int(self.tables.ent[t, i])

    def pte_state(self, proc: Process, vpage: int) -> str | int | None:
        """PTE as a protocol table shows it: page id, ``"N"`` when not present, None when absent."""
        t = self.pte_table(proc, vpage)
        if t is None:
            return None
        i = vpage & 511
        p = int(self.tables.ent[t, i])
        if p < 0:
            return None
        return p if self.tables.pres[t, i] else "N"

    def pmd_entries(self, proc: Process) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """All populated PMD entries: (pmd table, index, PTE table, address-space PMD number)."""
        ent = self.tables.ent
        tabs, idxs, ptes, nos = [], [], [], []
        for i0 in np.flatnonzero(ent[proc.pgd] >= 0):
            pud = int(ent[proc.pgd, i0])
            for i1 in np.flatnonzero(ent[pud] >= 0):
                pmd = int(ent[pud, i1])
                row = ent[pmd]
                sel = np.flatnonzero(row >= 0)
                if not len(sel):
                    continue
                tabs.append(np.full(len(sel), pmd, np.int64))
                idxs.append(sel)
                ptes.append(row[sel].astype(np.int64))
                nos.append(((int(i0) << 18) | (int(i1) << 9)) + sel)
        if not tabs:
            z = np.zeros(0, np.int64)
            return z, z, z, z
        return np.concatenate(tabs), np.concatenate(idxs), np.concatenate(ptes), np.concatenate(nos)

    def pud_entries(self, proc: Process) -> list[tuple[int, int, int]]:
        """Populated PUD entries as (pud table, index, PMD table)."""
        ent = self.tables.ent
        out = []
        for i0 in np.flatnonzero(ent[proc.pgd] >= 0):
            pud = int(ent[proc.pgd, i0])
            for i1 in np.flatnonzero(ent[pud] >= 0):
                out.append((pud, int(i1), int(ent[pud, i1])))
        return out

    def leaf_frames(self, proc: Process, vpages: np.ndarray) -> np.ndarray:
        """Vectorised walk; -1 where nothing is present."""
        vpages = np.asarray(vpages, dtype=np.int64)
        out = np.full(len(vpages), -1, dtype=np.int64)
        if not len(vpages):
            return out
        pmds = vpages >> 9
        uniq, inv = np.unique(pmds, return_inverse=True)
        looked = [self.pte_table(proc, int(m) << 9) for m in uniq]
        tids = np.array([-1 if t is None else t for t in looked], dtype=np.int64)[inv]
        ok = tids >= 0
        idx = vpages & 511
        frames = self.tables.ent[tids[ok], idx[ok]].astype(np.int64)
        frames[~self.tables.pres[tids[ok], idx[ok]]] = -1
        out[ok] = frames
        return out

    def present_vpages(self, proc: Process) -> np.ndarray:
        """Sorted virtual pages with a present PTE."""
        return self.snapshot_frames(proc)[0]

    def snapshot_frames(self, proc: Process) -> tuple[np.ndarray, np.ndarray]:
        """(sorted present vpages, their frames) by a full walk."""
        _, _, ptes, nos = self.pmd_entries(proc)
        if not len(ptes):
            z = np.zeros(0, np.int64)
            return z, z
        rows, cols = np.nonzero(self.tables.pres[ptes])
        frames = self.tables.ent[ptes[rows], cols].astype(np.int64)
        return (nos[rows] << 9) + cols, frames

    def present_count(self, proc: Process) -> int:
        _, _, ptes, _ = self.pmd_entries(proc)
        return int(self.tables.pres[ptes].sum()) if len(ptes) else 0

    def snapshot_image(self, proc: Process) -> tuple[np.ndarray, np.ndarray]:
        """(sorted present vpages, payload rows) by a full walk; a deep copy."""
        vp, frames = self.snapshot_frames(proc)
        return vp, self.phys.payload[frames]

    def image(self, proc: Process, vpages: np.ndarray, via_tlb: bool = False) -> np.ndarray:
        """Payload rows seen by ``proc`` at ``vpages``; zero rows where unmapped."""
        frames = self.leaf_frames(proc, vpages)
        if via_tlb and proc.tlb:
            pos = {int(v): i for i, v in enumerate(vpages)} if len(proc.tlb) * 8 > len(vpages) else None
            for v, p in proc.tlb.items():
                if pos is not None:
                    i = pos.get(v)
                else:
                    j = np.searchsorted(vpages, v)
                    i = int(j) if j < len(vpages) and vpages[j] == v else None
                if i is not None:
                    if frames[i] != p:
                        self.flag_incoherent(proc, v)
                    frames[i] = p
        rows = np.zeros((len(vpages), self.payload_bytes), np.uint8)
        ok = frames >= 0
        rows[ok] = self.phys.payload[frames[ok]]
        return rows

    # -- hooks into the fork engines ----------------------------------------
    def _checkpoint(self, proc: Process, event: CheckpointEvent) -> int:
        if not self.sessions:
            return 0
        syncs = 0
        for s in list(self.sessions):
            if s.parent_pid == proc.pid:
                syncs += s.checkpoint(event)
        return syncs

    def _unshare_range(self, proc: Process, pmd_nos: Iterable[int]) -> int:
        """Give ``proc`` private copies of any shared PTE tables in range (ODF)."""
        n = 0
        for m in pmd_nos:
            slot = self.pmd_slot(proc, m << 9)
            if slot is None:
                continue
            t = int(self.tables.ent[slot])
            if t >= 0 and self.tables.sharers[t] >= 2:
                self.cow_pte_table(proc, m << 9)
                n += 1
            elif t >= 0 and not self.tables.wr[slot]:
                self._settle_unshared(proc, slot)
        return n

    def _settle_unshared(self, proc: Process, slot: tuple[int, int]) -> None:
        # an ODF table whose other sharers are gone: make the PMD writable again in place
        if self.tables.sharers[int(self.tables.ent[slot])] == 1 and not self._session_owns(proc, slot):
            self.tables.wr[slot] = True

    def _session_owns(self, proc: Process, slot: tuple[int, int]) -> bool:
        return any(s.parent_pid == proc.pid and s.owns_slot(slot) for s in self.sessions)

    def cow_pte_table(self, proc: Process, vpage: int) -> int:
        """Replace the shared PTE table covering ``vpage`` with a private copy; returns kernel ns."""
        tb = self.tables
        slot = self.pmd_slot(proc, vpage)
        old = -1 if slot is None else int(tb.ent[slot])
        if old < 0 or tb.sharers[old] < 2:
            raise ValueError("PTE table is not shared")
        new = tb.alloc(PTE)
        present = tb.pres[old].copy()
        tb.wr[old, present] = False
        tb.ent[new] = tb.ent[old]
        tb.pres[new] = present
        tb.wr[new] = tb.wr[old]
        self.phys.get_many(tb.ent[old][present].astype(np.int64), distinct=True)
        tb.sharers[old] -= 1
        tb.ent[slot] = new
        tb.wr[slot] = True
        if tb.sharers[old] == 1:
            # the last remaining sharer no longer needs its PMD write-protected
            for other in self.procs.values():
                if other is proc or not other.alive:
                    continue
                oslot = self.pmd_slot(other, vpage)
                if oslot is not None and int(tb.ent[oslot]) == old:
                    tb.wr[oslot] = True
        dur = self.cost.table_copy()
        self.charge(proc.pid, dur, Cause.ODF_COW)
        self.trace.add(self.now, "odf_cow", pid=proc.pid, pmd=pmd_of(vpage), dur=dur)
        return dur

    # -- operations ---------------------------------------------------------
    def map_range(self, proc: Process, start: int, end: int, payload=None) -> np.ndarray:
        """Back ``[start, end)`` with fresh zeroed (or ``payload``-filled) pages."""
        vma = self._covering_vma(proc, start)
        if end > vma.end or end <= start:
            raise UnmappedAddress(f"[{start},{end}) is not inside one VMA")
        n = end - start
        if n > self.phys.free_count:
            raise OutOfPhysMem(f"need {n} pages, {self.phys.free_count} free")
        tb = self.tables
        first, last = pmd_of(start), pmd_of(end - 1)
        self._checkpoint(proc, CheckpointEvent(CheckpointOp.PAGE_FAULT, start, end))
        self._unshare_range(proc, range(first, last + 1))
        tids = np.empty(last - first + 1, np.int64)
        for k, m in enumerate(range(first, last + 1)):
            slot = self.pmd_slot(proc, m << 9, create=True)
            t = int(tb.ent[slot])
            if t < 0:
                t = tb.alloc(PTE)
                tb.ent[slot] = t
                tb.wr[slot] = True
            tids[k] = t
        # whole tables take row assignment; only the ragged ends need per-slot indexing
        lo_full = -(-start // 512)
        n_full = max(0, end // 512 - lo_full)
        full = tids[lo_full - first : lo_full - first + n_full]
        head = (lo_full << 9) - start if n_full else n
        body = len(full) * 512
        edges = np.r_[np.arange(start, start + head), np.arange(start + head + body, end)].astype(np.int64)
        rows, cols = tids[(edges >> 9) - first], edges & 511
        if tb.pres[rows, cols].any() or tb.pres[full].any():
            raise ValueError("range already mapped")
        pages = self.phys.alloc_many(n)
        edge_pages = np.r_[pages[:head], pages[head + body :]]
        tb.ent[rows, cols] = edge_pages
        tb.pres[rows, cols] = True
        tb.wr[rows, cols] = True
        if len(full):
            tb.ent[full] = pages[head : head + body].reshape(-1, 512)
            tb.pres[full] = True
            tb.wr[full] = True
        pl = self.phys.payload
        pl[pages] = 0
        if payload is not None:
            data = payload(np.arange(start, end, dtype=np.int64)) if callable(payload) else payload
            data = np.asarray(data, dtype=np.uint8)
            if data.ndim == 1:
                pl[pages, : len(data)] = data
            else:
                pl[pages, : data.shape[1]] = data
        return pages

    def read(self, proc: Process, vpage: int) -> bytes:
        if not proc.alive:
            raise VmError(f"pid {proc.pid} is dead")
        p = proc.tlb.get(vpage)
        if p is not None:
            if self.stale_possible and self.walk(proc, vpage) != p:
                self.flag_incoherent(proc, vpage)
            return self.phys.payload[p].tobytes()
        p = self.walk(proc, vpage)
        if p is None:
            self._covering_vma(proc, vpage)
            p = self._demand_fault(proc, vpage)
        proc.tlb[vpage] = p
        return self.phys.payload[p].tobytes()

    def flag_incoherent(self, proc: Process, vpage: int) -> None:
        hit = (proc.pid, vpage)
        if hit not in self.detector:
            self.detector.append(hit)
            self.trace.add(self.now, "coherence_violation", pid=proc.pid, vpage=vpage)

    def _demand_fault(self, proc: Process, vpage: int) -> int:
        # first touch (or touch after reclaim) gets a zeroed page
        self.map_range(proc, vpage, vpage + 1)
        self.charge(proc.pid, self.cost.fault(), Cause.DATA_PAGE_FAULT)
        return self.walk(proc, vpage)

    def write(self, proc: Process, vpage: int, data: bytes = b"", offset: int = 0,
              op: CheckpointOp = CheckpointOp.PAGE_FAULT) -> FaultOutcome:
        if not proc.alive:
            raise VmError(f"pid {proc.pid} is dead")
        if offset < 0 or offset + len(data) > self.payload_bytes:
            raise ValueError("write crosses the page payload")
        self._covering_vma(proc, vpage)
        tb = self.tables
        out = FaultOutcome("in_place")
        slot = self.pmd_slot(proc, vpage)
        if slot is not None and int(tb.ent[slot]) >= 0:
            t0 = self.now
            if not tb.wr[slot]:
                out.syncs = self._checkpoint(proc, CheckpointEvent.pmd_wide(op, vpage))
            if tb.sharers[int(tb.ent[slot])] >= 2:
                self.cow_pte_table(proc, vpage)
                out.odf_copies = 1
            elif not tb.wr[slot]:
                self._settle_unshared(proc, slot)
            out.kernel_ns += self.now - t0
        t = self.pte_table(proc, vpage)
        i = vpage & 511
        if t is None or not tb.pres[t, i]:
            self._demand_fault(proc, vpage)
            out.kernel_ns += self.cost.fault()
            t = self.pte_table(proc, vpage)
        p = int(tb.ent[t, i])
        rc = int(self.phys.refcount[p])
        if not tb.wr[t, i] or rc > 1:
            if rc == 1:
                out.kind = "reuse"
            else:
                new = self.phys.alloc()
                self.phys.payload[new] = self.phys.payload[p]
                self.phys.put(p)
                tb.ent[t, i] = new
                proc.tlb.pop(vpage, None)
                p = new
                out.kind = "cow"
            tb.wr[t, i] = True
            out.kernel_ns += self.charge(proc.pid, self.cost.fault(), Cause.DATA_PAGE_FAULT)
        if data:
            self.phys.payload[p, offset : offset + len(data)] = np.frombuffer(data, np.uint8)
        return out

    def get_user_page(self, proc: Process, vpage: int) -> FaultOutcome:
        """Pin a page for device write: breaks CoW like a write fault, data untouched."""
        return self.write(proc, vpage, b"", op=CheckpointOp.GET_USER_PAGE)

    def write_bulk(self, proc: Process, vpages: np.ndarray, offsets: np.ndarray, data: np.ndarray) -> None:
        """Vectorised in-place store into private writable pages (initial load only)."""
        frames = self.leaf_frames(proc, vpages)
        if (frames < 0).any():
            raise UnmappedAddress("bulk write to unmapped page")
        if (self.phys.refcount[frames] != 1).any() or self.sessions:
            raise VmError("bulk write needs private pages and no snapshot in flight")
        width = data.shape[1]
        if (offsets + width > self.payload_bytes).any():
            raise ValueError("bulk write crosses the page payload")
        cols = offsets[:, None] + np.arange(width)
        self.phys.payload[frames[:, None], cols] = data

    def migrate_page(self, owner_pid: int, vpage: int, new_phys: int | None = None,
                     observe: Callable[[int, str], None] | None = None) -> int:
        """Move the owner's page at ``vpage`` to a new frame using the six-step protocol.

        Other processes are located by scanning their PTEs for the old
        translation, so a PTE table shared with the owner is already "N" by the
        time it is scanned and that process's TLB is never flushed.
        """
        tb = self.tables
        owner = self.procs[owner_pid]
        t = self.pte_table(owner, vpage)
        i = vpage & 511
        if t is None or not tb.pres[t, i]:
            raise UnmappedAddress(f"vpage {vpage:#x} not present in pid {owner_pid}")
        note = observe or (lambda step, label: None)
        x = int(tb.ent[t, i])
        y = self.phys.take(new_phys) if new_phys is not None else self.phys.alloc()
        slot = self.pmd_slot(owner, vpage)
        self._checkpoint(owner, CheckpointEvent.pmd_wide(CheckpointOp.MIGRATE, vpage))
        claim = next((s for s in self.sessions if s.parent_pid == owner_pid and s.owns_slot(slot)), None)
        if claim is not None:
            claim.hold_claim(pmd_of(vpage), "migrate")
        note(1, "Initial state")
        tb.pres[t, i] = False
        note(2, "P: Set PTE -> None present")
        owner.tlb.pop(vpage, None)
        note(3, "P: Flush TLB")
        moved = []
        for pid in sorted(self.procs):
            q = self.procs[pid]
            if q is owner or not q.alive:
                continue
            qt = self.pte_table(q, vpage)
            if qt is not None and tb.pres[qt, i] and int(tb.ent[qt, i]) == x:
                tb.pres[qt, i] = False
                q.tlb.pop(vpage, None)
                moved.append(qt)
                self.trace.add(self.now, "migrate_scan", pid=pid, vpage=vpage, result="invalidated")
            else:
                if qt == t:
                    self.shared_migrations.append((pid, vpage))
                if q.tlb.get(vpage) == x:
                    self.stale_possible = True
                self.trace.add(self.now, "migrate_scan", pid=pid, vpage=vpage, result="skipped")
        note(4, "Other processes scanned")
        self.phys.payload[y] = self.phys.payload[x]
        tb.ent[t, i] = y
        tb.pres[t, i] = True
        for qt in moved:
            tb.ent[qt, i] = y
            tb.pres[qt, i] = True
        self.phys.get(y, len(moved))
        self.phys.put(x, 1 + len(moved))
        moved_pids = {pid for pid in self.procs if self.procs[pid] is not owner and self.procs[pid].alive
                      and self.walk(self.procs[pid], vpage) == y}
        for s in self.persisting:
            if s.child_pid in moved_pids or s.child_pid == owner_pid:
                s.frame_moved(vpage, x, y)
        note(5, "P: Update PTE")
        if claim is not None:
            claim.release_claim(pmd_of(vpage))
        self.trace.add(self.now, "migrate", pid=owner_pid, vpage=vpage, old=x, new=y)
        return y

    def unmap_range(self, proc: Process, start: int, end: int) -> int:
        """munmap: split/shrink/delete VMAs and drop the covered PTEs. Returns pages dropped."""
        if end <= start:
            raise ValueError("empty range")
        self._require_covered(proc, start, end)
        self._checkpoint(proc, CheckpointEvent.vma_wide_event(CheckpointOp.UNMAP, start, end))
        self._unshare_range(proc, range(pmd_of(start), pmd_of(end - 1) + 1))
        dropped = self._clear_ptes(proc, start, end, free_tables=True)
        kept = []
        for v in proc.vmas:
            if v.end <= start or v.start >= end:
                kept.append(v)
                continue
            if v.start < start:
                kept.append(Vma(v.start, start, v.peer))
            if v.end > end:
                kept.append(Vma(end, v.end, v.peer))
        proc.vmas = sorted(kept, key=lambda v: v.start)
        self.trace.add(self.now, "unmap", pid=proc.pid, start=start, end=end, pages=dropped)
        return dropped

    def protect_range(self, proc: Process, start: int, end: int) -> int:
        """mprotect read-only: clear the PTE write bits in range."""
        self._require_covered(proc, start, end)
        self._checkpoint(proc, CheckpointEvent.vma_wide_event(CheckpointOp.PROTECT, start, end))
        self._unshare_range(proc, range(pmd_of(start), pmd_of(end - 1) + 1))
        n = 0
        for m in range(pmd_of(start), pmd_of(end - 1) + 1):
            t = self.pte_table(proc, m << 9)
            if t is None:
                continue
            lo = max(start, m << 9) - (m << 9)
            hi = min(end, (m + 1) << 9) - (m << 9)
            n += int(self.tables.wr[t, lo:hi].sum())
            self.tables.wr[t, lo:hi] = False
        self.trace.add(self.now, "protect", pid=proc.pid, start=start, end=end)
        return n

    def oom_reclaim(self, proc: Process, vpage: int) -> bool:
        """Zap one page's PTE as the OOM reaper would."""
        self._covering_vma(proc, vpage)
        self._checkpoint(proc, CheckpointEvent.pmd_wide(CheckpointOp.OOM_RECLAIM, vpage))
        self._unshare_range(proc, [pmd_of(vpage)])
        hit = self._clear_ptes(proc, vpage, vpage + 1, free_tables=False) > 0
        self.trace.add(self.now, "oom_reclaim", pid=proc.pid, vpage=vpage, hit=hit)
        return hit

    def _require_covered(self, proc: Process, start: int, end: int) -> None:
        covered = 0
        for v in proc.vmas:
            covered += max(0, min(end, v.end) - max(start, v.start))
        if covered != end - start:
            raise UnmappedAddress(f"[{start},{end}) is not fully covered by VMAs of pid {proc.pid}")

    def _clear_ptes(self, proc: Process, start: int, end: int, free_tables: bool) -> int:
        tb = self.tables
        dropped = 0
        for m in range(pmd_of(start), pmd_of(end - 1) + 1):
            slot = self.pmd_slot(proc, m << 9)
            if slot is None:
                continue
            t = int(tb.ent[slot])
            if t < 0:
                continue
            lo = max(start, m << 9) - (m << 9)
            hi = min(end, (m + 1) << 9) - (m << 9)
            sel = np.flatnonzero(tb.pres[t, lo:hi]) + lo
            self.phys.put_many(tb.ent[t, sel].astype(np.int64))
            tb.ent[t, sel] = -1
            tb.pres[t, sel] = False
            tb.wr[t, sel] = False
            dropped += len(sel)
            if free_tables and not tb.pres[t].any():
                tb.free(t)
                tb.ent[slot] = -1
                tb.wr[slot] = False
        if end - start < len(proc.tlb):
            for v in range(start, end):
                proc.tlb.pop(v, None)
        else:
            for v in [v for v in proc.tlb if start <= v < end]:
                del proc.tlb[v]
        return dropped

    def exit_process(self, proc: Process) -> None:
        """Tear down a process, dropping its mappings and (unshared) tables."""
        if not proc.alive:
            return
        tb = self.tables
        _, _, ptes, _ = self.pmd_entries(proc)
        shared = tb.sharers[ptes] > 1
        tb.sharers[ptes[shared]] -= 1
        private = ptes[~shared]
        if len(private):
            self.phys.put_many(tb.ent[private][tb.pres[private]].astype(np.int64))
        upper = [pmd for _, _, pmd in self.pud_entries(proc)]
        upper += [int(tb.ent[proc.pgd, i0]) for i0 in np.flatnonzero(tb.ent[proc.pgd] >= 0)]
        tb.free_many(np.concatenate([private, np.array(upper + [proc.pgd], dtype=np.int64)]))
        proc.tlb.clear()
        proc.alive = False
        # a survivor left alone on a formerly shared table gets its PMD back
        if shared.any():
            for other in self.procs.values():
                if not other.alive:
                    continue
                tabs, idxs, optes, _ = self.pmd_entries(other)
                lone = np.isin(optes, ptes[shared]) & (tb.sharers[optes] == 1) & ~tb.wr[tabs, idxs]
                for k in np.flatnonzero(lone):
                    if not self._session_owns(other, (int(tabs[k]), int(idxs[k]))):
                        tb.wr[tabs[k], idxs[k]] = True
        self.trace.add(self.now, "exit", pid=proc.pid)


def coherence_audit(world: World) -> list[tuple[int, int]]:
    """TLB entries whose cached frame disagrees with a fresh walk. Read-only."""
    bad = []
    for pid in sorted(world.procs):
        proc = world.procs[pid]
        if not proc.alive:
            continue
        for vpage in sorted(proc.tlb):
            if world.walk(proc, vpage) != proc.tlb[vpage]:
                bad.append((pid, vpage))
    return bad


def refcount_audit(world: World) -> dict[int, tuple[int, int]]:
    """Pages whose refcount differs from the number of leaf slots mapping them.

    A PTE table shared by several processes is one set of slots and counts once.
    """
    tb = world.tables
    tables: set[int] = set()
    for proc in world.procs.values():
        if proc.alive:
            tables.update(world.pmd_entries(proc)[2].tolist())
    counts = np.zeros(len(world.phys), np.int64)
    for t in tables:
        np.add.at(counts, tb.ent[t][tb.pres[t]].astype(np.int64), 1)
    bad = np.flatnonzero(counts != world.phys.refcount)
    return {int(p): (int(world.phys.refcount[p]), int(counts[p])) for p in bad}


def structure_audit(world: World) -> list[str]:
    """Level discipline and sharing bookkeeping across all live processes."""
    tb = world.tables
    problems = []
    parents: dict[int, int] = {}
    for proc in world.procs.values():
        if not proc.alive:
            continue
        stack = [(proc.pgd, PGD)]
        while stack:
            t, lvl = stack.pop()
            if tb.level[t] != lvl:
                problems.append(f"table {t} at depth {LEVEL_NAMES[lvl]} has level {tb.level[t]}")
            if lvl == PTE:
                continue
            for i in np.flatnonzero(tb.ent[t] >= 0):
                c = int(tb.ent[t, i])
                parents[c] = parents.get(c, 0) + 1
                stack.append((c, lvl + 1))
    for t, n in parents.items():
        if n != tb.sharers[t]:
            problems.append(f"table {t} referenced {n} times but sharers={tb.sharers[t]}")
        if n > 1 and tb.level[t] != PTE:
            problems.append(f"non-leaf table {t} shared")
    return problems
