"""Discrete-event scheduler, nanosecond cost model and the parent's CPU timeline.

Everything runs on one logical timeline measured in integer nanoseconds.
The parent process is modelled as a single FIFO server: queries and OS
operations queue behind each other, and every kernel episode charged while a
job runs pushes the job's completion (and every queued job) further out.
That is where out-of-service time turns into query latency.
"""
from __future__ import annotations

import heapq
import json
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from typing import Any, Callable, Iterable

PTES_PER_TABLE = 512


@dataclass(frozen=True)
class CostModel:
    """Per-action charges in nanoseconds.

    ``c_pte`` and ``persist_per_page`` are fractional; every charge is rounded
    to an integer only after multiplying by its count.
    """

    c_nonleaf: float = 500.0
    c_pte: float = 70e6 / 2**21  # 33.38 ns: 70 ms for 2^21 PTEs
    c_wp: float = 18.0
    c_fault: float = 3600.0
    persist_per_page: float = 40e9 / 2**21  # 19.07 us: 40 s for 8 GiB
    service_time: float = 20000.0
    c_vma: float = 1000.0

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise ValueError(f"cost {f.name} must be strictly positive")

    def table_copy(self) -> int:
        """One PMD entry plus its 512 PTEs."""
        return round(self.c_nonleaf + PTES_PER_TABLE * self.c_pte)

    def nonleaf(self, n: int) -> int:
        return round(n * self.c_nonleaf)

    def ptes(self, n: int) -> int:
        return round(n * self.c_pte)

    def wp_marks(self, n: int) -> int:
        return round(n * self.c_wp)

    def vmas(self, n: int) -> int:
        return round(n * self.c_vma)

    def fault(self) -> int:
        return round(self.c_fault)

    def persist(self, pages: int) -> int:
        return round(pages * self.persist_per_page)

    def service(self) -> int:
        return round(self.service_time)

    def replace(self, **overrides) -> "CostModel":
        unknown = set(overrides) - {f.name for f in fields(self)}
        if unknown:
            raise KeyError(f"unknown cost fields: {sorted(unknown)}")
        return CostModel(**{**asdict(self), **overrides})


class Cause(str, Enum):
    FORK_CALL = "ForkCall"
    PROACTIVE_SYNC = "ProactiveSync"
    ODF_COW = "OdfCow"
    DATA_PAGE_FAULT = "DataPageFault"


# page-table copies done on the parent's behalf; what bcc's copy_pmd_range counts
PT_COPY_CAUSES = (Cause.PROACTIVE_SYNC, Cause.ODF_COW)


@dataclass(frozen=True)
class Episode:
    pid: int
    start: int
    duration: int
    cause: Cause

    @property
    def end(self) -> int:
        return self.start + self.duration


class EventKind(str, Enum):
    QUERY_ARRIVAL = "QueryArrival"
    KERNEL_EPISODE_END = "KernelEpisodeEnd"
    CHILD_COPY_DONE = "ChildCopyDone"
    PERSIST_DONE = "PersistDone"
    OS_OP = "OsOp"
    ERROR_INJECT = "ErrorInject"


@dataclass
class Event:
    at: int
    kind: EventKind
    action: Callable[[], Any] | None = None
    data: dict = field(default_factory=dict)


class Trace:
    """Append-only list of flat records; exported as sorted JSON lines."""

    def __init__(self):
        self.records: list[dict] = []

    def add(self, t: int, kind: str, **fields) -> None:
        rec = {"t": int(t), "kind": kind}
        rec.update(fields)
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.ordered())

    def ordered(self) -> list[dict]:
        # lazily-advanced child work is recorded late; stable sort restores time order
        return sorted(self.records, key=lambda r: r["t"])

    def kernel_total(self, cause: Cause | str | None = None, pid: int | None = None) -> int:
        total = 0
        for r in self.records:
            if r["kind"] != "kernel":
                continue
            if cause is not None and r["cause"] != Cause(cause).value:
                continue
            if pid is not None and r["pid"] != pid:
                continue
            total += r["dur"]
        return total

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True, default=_jsonable) + "\n" for r in self.ordered())


def _jsonable(obj):
    if isinstance(obj, Enum):
        return obj.value
    raise TypeError(type(obj))


class Scheduler:
    """Stable priority queue of events; ties run in insertion order."""

    def __init__(self, trace: Trace | None = None):
        self.now = 0
        self._heap: list[tuple[int, int, Event]] = []
        self._seq = 0
        self.trace = trace if trace is not None else Trace()

    def schedule(self, event: Event) -> Event:
        if event.at < self.now:
            raise ValueError(f"cannot schedule at {event.at} < now {self.now}")
        heapq.heappush(self._heap, (event.at, self._seq, event))
        self._seq += 1
        return event

    def at(self, t: int, kind: EventKind, action: Callable[[], Any] | None = None, **data) -> Event:
        return self.schedule(Event(int(t), kind, action, data))

    def pending(self) -> int:
        return len(self._heap)

    def next_time(self) -> int | None:
        return self._heap[0][0] if self._heap else None

    def run_until(self, t_end: int | None = None) -> Trace:
        heap = self._heap
        while heap and (t_end is None or heap[0][0] <= t_end):
            at, _, ev = heapq.heappop(heap)
            self.now = at
            if ev.action is not None:
                ev.action()
        if t_end is not None and t_end > self.now:
            self.now = t_end
        return self.trace


class ManualClock:
    """Stand-alone clock for driving vm_core directly; each charge advances time."""

    def __init__(self, now: int = 0):
        self.now = now
        self.episodes: list[Episode] = []

    def charge_kernel(self, pid: int, duration: int, cause: Cause) -> Episode:
        if duration <= 0:
            raise ValueError("kernel episode duration must be positive")
        ep = Episode(pid, self.now, int(duration), Cause(cause))
        self.episodes.append(ep)
        self.now += ep.duration
        return ep

    def kernel_total(self, cause: Cause | None = None) -> int:
        return sum(e.duration for e in self.episodes if cause is None or e.cause == cause)


@dataclass
class Job:
    arrival: int
    run: Callable[[], int | None]  # executes at job start; returns user-mode service ns
    query_id: int | None = None
    label: str = ""


@dataclass
class Completion:
    query_id: int
    arrival: int
    start: int
    finish: int


class ParentCpu:
    """The parent's single CPU: FIFO job queue plus kernel-episode accounting.

    ``now`` is the job cursor while a job executes, so any kernel time charged
    by nested operations lands back-to-back on the timeline.
    """

    def __init__(self, scheduler: Scheduler, pid: int):
        self.sched = scheduler
        self.pid = pid
        self.free_at = 0
        self.queue: deque[Job] = deque()
        self.episodes: list[Episode] = []
        self.completions: list[Completion] = []
        self._cursor: int | None = None
        self._wake_pending = False

    @property
    def now(self) -> int:
        return self._cursor if self._cursor is not None else self.sched.now

    def charge_kernel(self, pid: int, duration: int, cause: Cause) -> Episode:
        if duration <= 0:
            raise ValueError("kernel episode duration must be positive")
        cause = Cause(cause)
        if pid != self.pid:
            # other processes never preempt the parent; record only
            ep = Episode(pid, self.now, int(duration), cause)
            self.sched.trace.add(ep.start, "kernel", pid=pid, dur=ep.duration, cause=cause.value)
            return ep
        if self._cursor is None:
            start = max(self.sched.now, self.free_at)
            ep = Episode(pid, start, int(duration), cause)
            self.free_at = ep.end
            self.sched.at(ep.end, EventKind.KERNEL_EPISODE_END)
        else:
            ep = Episode(pid, self._cursor, int(duration), cause)
            self._cursor = ep.end
        self.episodes.append(ep)
        self.sched.trace.add(ep.start, "kernel", pid=pid, dur=ep.duration, cause=cause.value)
        return ep

    def submit(self, job: Job) -> None:
        if not self.queue and self.free_at <= self.sched.now:
            self._execute(job, self.sched.now)
            return
        self.queue.append(job)
        if not self._wake_pending:
            self._wake_pending = True
            self.sched.at(self.free_at, EventKind.KERNEL_EPISODE_END, self._wake)

    def _wake(self) -> None:
        self._wake_pending = False
        while self.queue and self.free_at <= self.sched.now:
            self._execute(self.queue.popleft(), self.sched.now)
        if self.queue:
            self._wake_pending = True
            self.sched.at(self.free_at, EventKind.KERNEL_EPISODE_END, self._wake)

    def _execute(self, job: Job, start: int) -> None:
        self._cursor = start
        service = 0
        try:
            service = job.run() or 0
        finally:
            finish = self._cursor + int(service)
            self._cursor = None
        self.free_at = finish
        if job.query_id is not None:
            self.completions.append(Completion(job.query_id, job.arrival, start, finish))

    def out_of_service(self, causes: Iterable[Cause] | None = None) -> int:
        wanted = None if causes is None else {Cause(c) for c in causes}
        return sum(e.duration for e in self.episodes if wanted is None or e.cause in wanted)
