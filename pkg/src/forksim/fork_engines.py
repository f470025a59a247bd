"""Default fork, shared-PTE-table fork (ODF) and Async-fork.

Async-fork splits page-table copying between the two processes.  The parent
copies only the PGD/PUD levels and write-protects every PMD entry; that R/W bit
is then the sole record of "not yet copied".  The child's workers copy PMD
entries and their 512 PTEs afterwards.  Whenever the parent is about to change
a PTE under a still-protected PMD, it copies that PMD to the child first
(proactive synchronisation), so the child always ends up with the table as it
was at fork time.

Child workers are not threads.  Each has its own clock and the session steps
them lazily, always the worker furthest behind, up to whatever instant the
parent is about to act at.  A copy is applied at the start of its interval and
the PMD stays claimed until the interval ends.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

from .sim_clock import Cause, EventKind, Scheduler
from .vm_core import (PGD, PMD, PTE, PUD, CheckpointEvent, CheckpointOp, OutOfPhysMem, PeerLink,
                      Process, Vma, World, pmd_of)


class Engine(str, Enum):
    DEFAULT = "Default"
    ODF = "Odf"
    ASYNC = "Async"


class Phase(str, Enum):
    PARENT_COPY = "ParentCopy"
    CHILD_COPY = "ChildCopy"
    PERSIST = "Persist"
    DONE = "Done"
    ABORTED = "Aborted"


class RollbackCase(str, Enum):
    PARENT_PHASE = "ParentPhase"
    CHILD_PHASE = "ChildPhase"
    SYNC_PHASE = "SyncPhase"


_INJECT_PHASES = {"parent": RollbackCase.PARENT_PHASE, "child": RollbackCase.CHILD_PHASE,
                  "sync": RollbackCase.SYNC_PHASE}
ENOMEM = "ENOMEM"


@dataclass(frozen=True)
class ErrorInjection:
    """Fail the ``site``-th PUD copy (parent), child PMD copy (child) or proactive sync (sync)."""

    phase: str
    site: int = 1

    def __post_init__(self):
        if self.phase not in _INJECT_PHASES:
            raise ValueError(f"error phase must be one of {sorted(_INJECT_PHASES)}")
        if self.site < 1:
            raise ValueError("error site is a 1-based ordinal")

    @property
    def case(self) -> RollbackCase:
        return _INJECT_PHASES[self.phase]


@dataclass(eq=False)
class CopyUnit:
    """One VMA's share of the child's copy work."""

    index: int
    start: int
    end: int
    pmds: list[int]
    link: PeerLink
    child_link: PeerLink
    done: bool = False


@dataclass(eq=False)
class Worker:
    index: int
    clock: int
    units: deque = field(default_factory=deque)
    unit: CopyUnit | None = None
    pending: deque = field(default_factory=deque)
    revisit: list = field(default_factory=list)
    planned: int = 0

    @property
    def finished(self) -> bool:
        return self.unit is None and not self.units


_PHASE_ORDER = [Phase.PARENT_COPY, Phase.CHILD_COPY, Phase.PERSIST, Phase.DONE]


class SnapshotSession:
    """One fork plus its persist task."""

    def __init__(self, world: World, engine: Engine, parent: Process, workers: int = 1,
                 injection: ErrorInjection | None = None, sched: Scheduler | None = None):
        if workers < 1:
            raise ValueError("workers must be >= 1")
        self.world = world
        self.engine = Engine(engine)
        self.parent = parent
        self.parent_pid = parent.pid
        self.child: Process | None = None
        self.workers = workers
        self.injection = injection
        self.sched = sched
        self.phase = Phase.PARENT_COPY
        self.phases = [Phase.PARENT_COPY]
        self.error: str | None = None
        self.rollback_case: RollbackCase | None = None
        self.fork_start = world.now
        self.fork_end: int | None = None
        self.kernel_time = 0
        self.copy_start: int | None = None
        self.copy_end: int | None = None
        self.persist_start: int | None = None
        self.persist_end: int | None = None
        self.units: list[CopyUnit] = []
        self.uncopied: dict[int, CopyUnit] = {}
        self.pslot: dict[int, tuple[int, int]] = {}
        self._slot_pmd: dict[tuple[int, int], int] = {}
        self.claims: dict[int, tuple[str, int]] = {}
        self.sync_log: list[tuple[int, int, int]] = []  # (start, duration, pmd)
        self.copy_log: list[tuple[int, int, int, int]] = []  # (worker, start, end, pmd)
        self._workers: list[Worker] = []
        self._sites = {"parent": 0, "child": 0, "sync": 0}
        self.persist_vpages: np.ndarray | None = None
        self._tlb_rows: dict[int, np.ndarray] = {}
        self.dump_rows: np.ndarray | None = None
        self.on_done: list[Callable[["SnapshotSession"], None]] = []
        self.meta: dict = {}
        self.capture_dump = True  # False: persist is timed but no image is kept

    # -- bookkeeping --------------------------------------------------------
    @property
    def child_pid(self) -> int | None:
        return None if self.child is None else self.child.pid

    def _enter(self, phase: Phase) -> None:
        if phase != Phase.ABORTED:
            if self.phase == Phase.ABORTED or _PHASE_ORDER.index(phase) <= _PHASE_ORDER.index(self.phase):
                raise AssertionError(f"phase {self.phase} -> {phase} is not monotone")
        self.phase = phase
        self.phases.append(phase)
        self.world.trace.add(self.world.now, "phase", session=self.engine.value, child=self.child_pid,
                             phase=phase.value)

    def uncopied_counts(self) -> dict[int, int]:
        counts = {u.index: 0 for u in self.units}
        for u in self.uncopied.values():
            counts[u.index] += 1
        return counts

    def owns_slot(self, slot: tuple[int, int]) -> bool:
        pmd = self._slot_pmd.get(slot)
        return pmd is not None and pmd in self.uncopied

    def hold_claim(self, pmd: int, holder: str, until: int | None = None) -> None:
        self.claims[pmd] = (holder, self.world.now if until is None else until)

    def release_claim(self, pmd: int) -> None:
        self.claims.pop(pmd, None)

    def _claimed_at(self, pmd: int, t: int) -> int | None:
        c = self.claims.get(pmd)
        if c is None:
            return None
        if c[1] > t:
            return c[1]
        del self.claims[pmd]
        return None

    def wp_census(self) -> int:
        """Parent PMD entries this session still holds write-protected."""
        tb = self.world.tables
        return sum(1 for pmd in self.uncopied if not tb.wr[self.pslot[pmd]])

    @property
    def copy_span(self) -> tuple[int, int] | None:
        if self.copy_start is None or self.copy_end is None:
            return None
        return self.copy_start, self.copy_end

    def interruptions(self) -> list[tuple[int, int, int]]:
        return list(self.sync_log)

    def _inject(self, phase: str) -> None:
        self._sites[phase] += 1
        inj = self.injection
        if inj is not None and inj.phase == phase and inj.site == self._sites[phase]:
            self.world.trace.add(self.world.now, "error_inject", phase=phase, site=inj.site)
            raise OutOfPhysMem(f"injected failure at {phase} site {inj.site}")

    # -- copying one PMD ----------------------------------------------------
    def _copy_pmd(self, pmd: int) -> None:
        """Copy the parent's PMD entry and its 512 PTEs to the child (both sides go CoW)."""
        world, tb = self.world, self.world.tables
        pslot = self.pslot[pmd]
        src = int(tb.ent[pslot])
        cslot = world.pmd_slot(self.child, pmd << 9, create=True)
        if src >= 0:
            new = tb.alloc(PTE)
            present = tb.pres[src].copy()
            tb.wr[src, present] = False
            tb.ent[new] = tb.ent[src]
            tb.pres[new] = present
            tb.wr[new] = tb.wr[src]
            world.phys.get_many(tb.ent[src][present].astype(np.int64), distinct=True)
            tb.ent[cslot] = new
            tb.wr[cslot] = True
        tb.wr[pslot] = True
        del self.uncopied[pmd]

    # -- parent side --------------------------------------------------------
    def checkpoint(self, event: CheckpointEvent) -> int:
        """Sync every still-protected PMD the event is about to touch; returns syncs done."""
        if self.phase != Phase.CHILD_COPY:
            return 0
        self.advance(self.world.now)
        if self.phase != Phase.CHILD_COPY or event.op == CheckpointOp.MIGRATE:
            return 0
        if event.vma_wide:
            todo = []
            for vma in self.parent.vmas:
                if vma.end <= event.start or vma.start >= event.end:
                    continue
                if vma.peer.linked_pid is None:
                    continue
                lo, hi = max(vma.start, event.start), min(vma.end, event.end)
                todo.extend(m for m in range(pmd_of(lo), pmd_of(hi - 1) + 1) if m in self.uncopied)
        else:
            m = pmd_of(event.start)
            todo = [m] if m in self.uncopied else []
        syncs = 0
        for m in sorted(set(todo)):
            if m in self.uncopied and self.phase == Phase.CHILD_COPY:
                self.proactive_sync(m)
                syncs += 1
        return syncs

    def proactive_sync(self, pmd: int) -> int:
        """Parent copies one uncopied PMD to the child; returns kernel ns charged."""
        if self.phase != Phase.CHILD_COPY or pmd not in self.uncopied:
            raise ValueError(f"PMD {pmd} is not awaiting copy")
        world = self.world
        start = world.now
        dur = world.cost.table_copy()
        unit = self.uncopied[pmd]
        try:
            self._inject("sync")
            self._copy_pmd(pmd)
        except OutOfPhysMem as exc:
            world.charge(self.parent_pid, dur, Cause.PROACTIVE_SYNC)
            self.sync_log.append((start, dur, pmd))
            self._rollback_sync(unit, str(exc))
            return dur
        self.claims[pmd] = ("parent", start + dur)
        world.charge(self.parent_pid, dur, Cause.PROACTIVE_SYNC)
        self.sync_log.append((start, dur, pmd))
        world.trace.add(start, "proactive_sync", pid=self.parent_pid, child=self.child_pid, pmd=pmd, dur=dur)
        return dur

    def sync_unit(self, unit: CopyUnit) -> int:
        """Copy everything left in one VMA to the child (consecutive-snapshot rule)."""
        n = 0
        for m in unit.pmds:
            if m in self.uncopied and self.phase == Phase.CHILD_COPY:
                self.proactive_sync(m)
                n += 1
        return n

    def drain(self) -> int:
        """Proactively finish all remaining copy work for this session."""
        self.advance(self.world.now)
        n = 0
        for u in self.units:
            n += self.sync_unit(u)
        return n

    # -- child side ---------------------------------------------------------
    def _plan_workers(self, t: int) -> None:
        order = sorted(self.units, key=lambda u: (-len(u.pmds), u.start))
        self._workers = [Worker(i, t) for i in range(self.workers)]
        for k, unit in enumerate(order):
            w = self._workers[k % self.workers]
            w.units.append(unit)
            w.planned += len(unit.pmds)

    def predicted_copy_end(self) -> int:
        cost = self.world.cost.table_copy()
        return max((w.clock + w.planned * cost for w in self._workers), default=self.copy_start or 0)

    def _link_error(self) -> str | None:
        for u in self.units:
            if u.link.error_code is not None and u.link.linked_pid == self.child_pid:
                return u.link.error_code
        return None

    def _step(self, w: Worker) -> None:
        """Advance one worker by one PMD copy (or one piece of zero-cost bookkeeping)."""
        cost = self.world.cost.table_copy()
        if w.unit is None:
            err = self._link_error()
            if err is not None:
                self._abort_child(err, w.clock)
                return
            w.unit = w.units.popleft()
            w.pending = deque(w.unit.pmds)
            w.revisit = []
            return
        while w.pending:
            m = w.pending.popleft()
            w.planned -= 1
            if self._claimed_at(m, w.clock) is not None:
                w.revisit.append(m)
                w.planned += 1
                continue
            if m not in self.uncopied:
                continue
            t0 = w.clock
            try:
                self._inject("child")
                self._copy_pmd(m)
            except OutOfPhysMem as exc:
                self._abort_child(str(exc), t0)
                return
            w.clock = t0 + cost
            self.claims[m] = (f"worker{w.index}", w.clock)
            self.copy_log.append((w.index, t0, w.clock, m))
            return
        if w.revisit:
            # claims still held: wait for the earliest release, then retry
            waits = [self._claimed_at(m, w.clock) for m in w.revisit]
            held = [u for u in waits if u is not None]
            if len(held) == len(waits):
                w.clock = min(held)
            w.pending = deque(w.revisit)
            w.revisit = []
            return
        err = self._link_error()
        if err is not None:
            self._abort_child(err, w.clock)
            return
        unit, w.unit = w.unit, None
        unit.done = True
        if unit.link.linked_pid == self.child_pid:
            unit.link.clear()
        unit.child_link.clear()
        self.world.trace.add(w.clock, "vma_copied", child=self.child_pid, vma=unit.index)

    def advance(self, t: int | float) -> None:
        """Run child workers whose clocks are at or before ``t``."""
        while self.phase == Phase.CHILD_COPY:
            live = [w for w in self._workers if not w.finished]
            if not live:
                self._finish_copy()
                return
            w = min(live, key=lambda w: (w.clock, w.index))
            if w.clock > t:
                return
            self._step(w)

    def _finish_copy(self) -> None:
        self.copy_end = max(w.clock for w in self._workers) if self._workers else self.copy_start
        self._leave_registry()
        self.world.trace.add(self.copy_end, "child_copy_done", child=self.child_pid)
        self._start_persist(self.copy_end)

    def _poll_copy(self) -> None:
        self.advance(self.sched.now)
        if self.phase == Phase.CHILD_COPY:
            self.sched.at(max(self.sched.now + 1, self.predicted_copy_end()), EventKind.CHILD_COPY_DONE,
                          self._poll_copy, child=self.child_pid)

    def _leave_registry(self) -> None:
        if self in self.world.sessions:
            self.world.sessions.remove(self)

    # -- rollback -----------------------------------------------------------
    def _restore(self, pmds) -> int:
        tb = self.world.tables
        n = 0
        for m in list(pmds):
            tb.wr[self.pslot[m]] = True
            self.uncopied.pop(m, None)
            n += 1
        return n

    def _rollback_sync(self, unit: CopyUnit, err: str) -> None:
        restored = self._restore([m for m in unit.pmds if m in self.uncopied])
        unit.link.error_code = ENOMEM
        self.error = err
        self.rollback_case = RollbackCase.SYNC_PHASE
        self.world.trace.add(self.world.now, "rollback", case=RollbackCase.SYNC_PHASE.value,
                             child=self.child_pid, vma=unit.index, restored=restored)

    def _abort_child(self, err: str, t: int) -> None:
        restored = self._restore(list(self.uncopied))
        for u in self.units:
            if u.link.linked_pid == self.child_pid:
                u.link.clear()
            u.link.error_code = None
            u.child_link.clear()
        self.error = self.error or err
        if self.rollback_case is None:
            self.rollback_case = RollbackCase.CHILD_PHASE
        self.copy_end = t
        self._leave_registry()
        self.world.exit_process(self.child)
        self._enter(Phase.ABORTED)
        self.world.trace.add(t, "rollback", case=RollbackCase.CHILD_PHASE.value, child=self.child_pid,
                             restored=restored)

    # -- persist ------------------------------------------------------------
    def _start_persist(self, t: int) -> None:
        self.persist_start = t
        self._enter(Phase.PERSIST)
        if self.capture_dump:
            vp, self._persist_frames = self.world.snapshot_frames(self.child)
            self.persist_vpages = vp
            n_pages = len(vp)
            self.world.persisting.append(self)
        else:
            vp = np.zeros(0, np.int64)
            n_pages = self.world.present_count(self.child)
        self.persist_end = t + self.world.cost.persist(n_pages)
        if self.sched is None:
            return
        ppp = self.world.cost.persist_per_page
        for v in sorted(self.child.tlb):
            i = int(np.searchsorted(vp, v))
            if i < len(vp) and vp[i] == v:
                when = max(self.sched.now, t + round(i * ppp))
                self.sched.at(when, EventKind.PERSIST_DONE, lambda v=v: self._read_cached(v), partial=True)
        self.sched.at(max(self.sched.now, self.persist_end), EventKind.PERSIST_DONE, self._complete_persist,
                      child=self.child_pid)

    def frame_moved(self, vpage: int, old: int, new: int) -> None:
        """A migration re-pointed the child's PTE; later walks read the new frame."""
        vp = self.persist_vpages
        i = int(np.searchsorted(vp, vpage))
        if i < len(vp) and vp[i] == vpage and self._persist_frames[i] == old:
            self._persist_frames[i] = new

    def _read_cached(self, vpage: int) -> None:
        # persist reads go through the child's TLB; a hit returns whatever that frame holds now
        p = self.child.tlb.get(vpage)
        if p is None or self.phase != Phase.PERSIST:
            return
        if self.world.walk(self.child, vpage) != p:
            self.world.flag_incoherent(self.child, vpage)
        self._tlb_rows[vpage] = self.world.phys.payload[p].copy()

    def _complete_persist(self) -> None:
        if self.phase != Phase.PERSIST:
            return
        # walk-visible child state is immutable during persist, so the frames found at
        # persist start still hold exactly what a page-by-page walk would read now
        if self.capture_dump:
            vp = self.persist_vpages
            rows = self.world.phys.payload[self._persist_frames]
            for v in self.child.tlb:
                if v not in self._tlb_rows:
                    self._read_cached(v)
            for v, row in self._tlb_rows.items():
                i = int(np.searchsorted(vp, v))
                if i < len(vp) and vp[i] == v:
                    rows[i] = row
            self.dump_rows = rows
        if self in self.world.persisting:
            self.world.persisting.remove(self)
        self.world.exit_process(self.child)
        self._enter(Phase.DONE)
        for cb in self.on_done:
            cb(self)

    def finish(self) -> np.ndarray:
        """Run any remaining copy and the persist task to completion right now (no scheduler)."""
        if self.phase == Phase.CHILD_COPY:
            self.advance(math.inf)
        if self.phase == Phase.PERSIST:
            self._complete_persist()
        return self.dump_rows


# -- engines ------------------------------------------------------------------
def _clone_vmas(parent: Process, child: Process) -> None:
    child.vmas = [Vma(v.start, v.end) for v in parent.vmas]


def _nonleaf_census(world: World, parent: Process) -> tuple[int, int]:
    pud_entries = world.pud_entries(parent)
    pgd_entries = int((world.tables.ent[parent.pgd] >= 0).sum())
    return pgd_entries, len(pud_entries)


def _copy_upper(world: World, parent: Process, child: Process) -> dict[int, int]:
    """Private child PGD/PUD/PMD tables mirroring the parent's; returns parent PMD table -> child's."""
    tb = world.tables
    pud_list = world.pud_entries(parent)
    pgd_idx = np.flatnonzero(tb.ent[parent.pgd] >= 0)
    n_pud_tables, n_pmd_tables = len(pgd_idx), len(pud_list)
    ids = tb.alloc_many(PUD, n_pud_tables + n_pmd_tables)  # all-or-nothing
    tb.level[ids[n_pud_tables:]] = PMD
    pud_map, pmd_map = {}, {}
    for k, i0 in enumerate(pgd_idx):
        old = int(tb.ent[parent.pgd, i0])
        pud_map[old] = int(ids[k])
        tb.ent[child.pgd, i0] = ids[k]
        tb.wr[child.pgd, i0] = True
    for k, (pud, i1, pmd) in enumerate(pud_list):
        new = int(ids[n_pud_tables + k])
        pmd_map[pmd] = new
        tb.ent[pud_map[pud], i1] = new
        tb.wr[pud_map[pud], i1] = True
    return pmd_map


def fork_default(world: World, parent: Process) -> tuple[Process, int]:
    """Full private copy of the table; every present PTE goes CoW on both sides."""
    if not parent.alive:
        raise ValueError("parent is not alive")
    tb = world.tables
    child = world.spawn()
    _clone_vmas(parent, child)
    tabs, idxs, ptes, _ = world.pmd_entries(parent)
    n_pgd, n_pud = _nonleaf_census(world, parent)
    try:
        pmd_map = _copy_upper(world, parent, child)
        new = tb.alloc_many(PTE, len(ptes))
    except OutOfPhysMem:
        world.exit_process(child)
        del world.procs[child.pid]
        raise
    pres = tb.pres[ptes]
    wr = tb.wr[ptes] & ~pres
    tb.wr[ptes] = wr
    tb.ent[new] = tb.ent[ptes]
    tb.pres[new] = pres
    tb.wr[new] = wr
    world.phys.get_many(tb.ent[ptes][pres].astype(np.int64))
    ctabs = np.array([pmd_map[int(t)] for t in tabs], dtype=np.int64)
    if len(ctabs):
        tb.ent[ctabs, idxs] = new
        tb.wr[ctabs, idxs] = True
    c = world.cost
    kt = c.vmas(len(parent.vmas)) + c.nonleaf(n_pgd + n_pud + len(ptes)) + c.ptes(len(ptes) * 512)
    world.charge(parent.pid, kt, Cause.FORK_CALL)
    world.trace.add(world.now, "fork", engine=Engine.DEFAULT.value, parent=parent.pid, child=child.pid, dur=kt)
    return child, kt


def fork_odf(world: World, parent: Process) -> tuple[Process, int]:
    """Private upper levels; PTE tables shared with the child and write-protected at the PMD."""
    if not parent.alive:
        raise ValueError("parent is not alive")
    tb = world.tables
    child = world.spawn()
    _clone_vmas(parent, child)
    tabs, idxs, ptes, _ = world.pmd_entries(parent)
    n_pgd, n_pud = _nonleaf_census(world, parent)
    try:
        pmd_map = _copy_upper(world, parent, child)
    except OutOfPhysMem:
        world.exit_process(child)
        del world.procs[child.pid]
        raise
    ctabs = np.array([pmd_map[int(t)] for t in tabs], dtype=np.int64)
    if len(ctabs):
        tb.ent[ctabs, idxs] = ptes
        tb.wr[ctabs, idxs] = False
        tb.wr[tabs, idxs] = False
        np.add.at(tb.sharers, ptes, 1)
    c = world.cost
    kt = c.vmas(len(parent.vmas)) + c.nonleaf(n_pgd + n_pud + len(ptes))
    world.charge(parent.pid, kt, Cause.FORK_CALL)
    world.trace.add(world.now, "fork", engine=Engine.ODF.value, parent=parent.pid, child=child.pid, dur=kt)
    return child, kt


def odf_cow_pte_table(world: World, proc: Process, vpage: int) -> int:
    """Un-share the PTE table covering ``vpage`` for ``proc``; returns kernel ns."""
    return world.cow_pte_table(proc, vpage)


def fork_async_parent(world: World, parent: Process, workers: int = 1,
                      injection: ErrorInjection | None = None,
                      sched: Scheduler | None = None) -> SnapshotSession:
    """Parent half of Async-fork: copy PGD/PUD entries, write-protect every PMD."""
    if not parent.alive:
        raise ValueError("parent is not alive")
    tb = world.tables
    s = SnapshotSession(world, Engine.ASYNC, parent, workers, injection, sched)
    child = world.spawn()
    _clone_vmas(parent, child)
    s.child = child
    tabs, idxs, _, nos = world.pmd_entries(parent)
    slot_of = {int(m): (int(t), int(i)) for t, i, m in zip(tabs, idxs, nos)}
    pmd_nos = np.asarray(nos)
    n_nonleaf = n_wp = n_vma = 0
    upper_done: dict[tuple[int, int], int] = {}
    pud_done: dict[int, int] = {}
    marked: list[int] = []
    try:
        for k, (pv, cv) in enumerate(zip(parent.vmas, child.vmas)):
            if pv.peer.linked_pid is not None:
                prior = next((o for o in world.sessions if o.child_pid == pv.peer.linked_pid
                              and o.phase == Phase.CHILD_COPY), None)
                if prior is not None:
                    prior.advance(world.now)
                    unit = next((u for u in prior.units if u.link is pv.peer), None)
                    if unit is not None and prior.phase == Phase.CHILD_COPY:
                        n = prior.sync_unit(unit)
                        world.trace.add(world.now, "consecutive_sync", prior_child=prior.child_pid,
                                        vma=k, pmds=n)
            # PGD then PUD entries covering this VMA
            for base in range(pv.start >> 18, ((pv.end - 1) >> 18) + 1):
                i0, i1 = base >> 9, base & 511
                if (i0, i1) in upper_done:
                    continue
                p_pud = int(tb.ent[parent.pgd, i0])
                if p_pud < 0 or int(tb.ent[p_pud, i1]) < 0:
                    continue
                s._inject("parent")
                if i0 not in pud_done:
                    c_pud = tb.alloc(PUD)
                    tb.ent[child.pgd, i0] = c_pud
                    tb.wr[child.pgd, i0] = True
                    pud_done[i0] = c_pud
                    n_nonleaf += 1
                c_pmd = tb.alloc(PMD)
                tb.ent[pud_done[i0], i1] = c_pmd
                tb.wr[pud_done[i0], i1] = True
                upper_done[(i0, i1)] = c_pmd
                n_nonleaf += 1
            lo, hi = pmd_of(pv.start), pmd_of(pv.end - 1)
            sel = pmd_nos[(pmd_nos >= lo) & (pmd_nos <= hi)]
            mine = []
            for m in sel.tolist():
                if m in s.pslot:
                    continue  # straddles a VMA boundary; owned by the lower VMA
                slot = slot_of[m]
                tb.wr[slot] = False
                s.pslot[m] = slot
                s._slot_pmd[slot] = m
                mine.append(m)
                marked.append(m)
            n_wp += len(mine)
            unit = CopyUnit(k, pv.start, pv.end, mine, pv.peer, cv.peer)
            s.units.append(unit)
            for m in mine:
                s.uncopied[m] = unit
            pv.peer.linked_pid = child.pid
            pv.peer.error_code = None
            cv.peer.linked_pid = parent.pid
            n_vma += 1
    except OutOfPhysMem as exc:
        for m in marked:
            tb.wr[s.pslot[m]] = True
        s.uncopied.clear()
        for u in s.units:
            u.link.clear()
        world.exit_process(child)
        s.error = str(exc)
        s.rollback_case = RollbackCase.PARENT_PHASE
        c = world.cost
        kt = c.vmas(n_vma) + c.nonleaf(n_nonleaf) + c.wp_marks(n_wp)
        if kt > 0:
            world.charge(parent.pid, kt, Cause.FORK_CALL)
        s.kernel_time = kt
        s.fork_end = world.now
        s._enter(Phase.ABORTED)
        world.trace.add(world.now, "rollback", case=RollbackCase.PARENT_PHASE.value, restored=len(marked))
        return s
    c = world.cost
    kt = c.vmas(n_vma) + c.nonleaf(n_nonleaf) + c.wp_marks(n_wp)
    if kt > 0:
        world.charge(parent.pid, kt, Cause.FORK_CALL)
    s.kernel_time = kt
    s.fork_end = world.now
    world.trace.add(world.now, "fork", engine=Engine.ASYNC.value, parent=parent.pid, child=child.pid, dur=kt)
    s.copy_start = s.fork_end
    s._enter(Phase.CHILD_COPY)
    world.sessions.append(s)
    s._plan_workers(s.copy_start)
    if sched is not None:
        sched.at(max(sched.now, s.predicted_copy_end()), EventKind.CHILD_COPY_DONE, s._poll_copy,
                 child=child.pid)
    return s


def async_child_copy(session: SnapshotSession) -> tuple[int, int] | None:
    """Run the child's copy to completion; returns the copy span."""
    if session.phase == Phase.CHILD_COPY:
        session.advance(math.inf)
    return session.copy_span


def checkpoint(session: SnapshotSession, event: CheckpointEvent) -> int:
    return session.checkpoint(event)


def proactive_sync(session: SnapshotSession, pmd: int) -> int:
    return session.proactive_sync(pmd)


def rollback(session: SnapshotSession, case: RollbackCase, unit: CopyUnit | None = None) -> None:
    """Apply one of the three abort paths to a live session."""
    case = RollbackCase(case)
    if case == RollbackCase.SYNC_PHASE:
        if unit is None:
            raise ValueError("sync-phase rollback needs the VMA unit")
        session._rollback_sync(unit, ENOMEM)
    elif case == RollbackCase.CHILD_PHASE:
        session._abort_child(ENOMEM, session.world.now)
    else:
        if session.phase != Phase.CHILD_COPY:
            raise ValueError("parent-phase rollback only applies before the child runs")
        session._restore(list(session.uncopied))
        for u in session.units:
            u.link.clear()
        session.rollback_case = case
        session._leave_registry()
        session.world.exit_process(session.child)
        session._enter(Phase.ABORTED)


def begin_snapshot(world: World, engine: Engine | str, parent: Process, workers: int = 1,
                   injection: ErrorInjection | None = None, sched: Scheduler | None = None,
                   capture_dump: bool = True) -> SnapshotSession:
    """Fork with ``engine`` and start the child's persist task."""
    engine = Engine(engine)
    if engine != Engine.ASYNC:
        # the PMD R/W bit cannot serve two masters: finish earlier Async copies first
        for prior in [o for o in world.sessions if o.parent_pid == parent.pid]:
            prior.drain()
    if engine == Engine.ASYNC:
        s = fork_async_parent(world, parent, workers, injection, sched)
        s.capture_dump = capture_dump
        return s
    s = SnapshotSession(world, engine, parent, workers, injection, sched)
    s.capture_dump = capture_dump
    fork = fork_default if engine == Engine.DEFAULT else fork_odf
    try:
        s.child, s.kernel_time = fork(world, parent)
    except OutOfPhysMem as exc:
        s.error = str(exc)
        s.rollback_case = RollbackCase.PARENT_PHASE
        s.fork_end = world.now
        s._enter(Phase.ABORTED)
        return s
    s.fork_end = world.now
    s._start_persist(s.fork_end)
    return s


def wp_census(world: World, proc: Process) -> int:
    """Write-protected PMD entries in ``proc``'s table."""
    tabs, idxs, _, _ = world.pmd_entries(proc)
    return int((~world.tables.wr[tabs, idxs]).sum()) if len(tabs) else 0
