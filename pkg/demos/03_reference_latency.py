# coding: utf-8

# # Snapshot latency under a write-heavy load
#
# 8 GiB instance, 50k SETs per second spread uniformly over 2^21 keys, one
# snapshot at 2 ms.  Each engine runs the same query stream.

import numpy as np

from forksim.fork_engines import Engine
from forksim.metrics import percentile
from forksim.scenarios import reference_run
from forksim.sim_clock import PT_COPY_CAUSES

runs = {e: reference_run(e, seed=0) for e in Engine}

# ## Latency of queries that arrived while a snapshot was in progress

print(f"{'engine':<9}{'count':>7}{'p50 us':>10}{'p99 us':>10}{'max us':>10}")
for e, res in runs.items():
    lat = res.latencies.latencies("snapshot")
    print(f"{e.value:<9}{len(lat):>7}{percentile(lat, 0.5) / 1e3:>10.1f}{percentile(lat, 0.99) / 1e3:>10.1f}"
          f"{lat.max() / 1e3:>10.1f}")

# ## Page-table copies charged to the parent
#
# ODF copies a table the first time the parent writes under it, all through
# the persist.  Async copies only tables the child hasn't reached yet, so the
# interruptions stop when the child's copy finishes.

for e in (Engine.ODF, Engine.ASYNC):
    res = runs[e]
    s = res.reports[0].session
    eps = res.interruptions.select(PT_COPY_CAUSES)
    starts = np.array([ep.start for ep in eps])
    print(f"{e.value:<6} {len(eps):4d} interruptions between {starts.min() / 1e6:.2f} and {starts.max() / 1e6:.2f} ms"
          f" (persist ends {s.persist_end / 1e6:.2f} ms" + (f", copy ends {s.copy_span[1] / 1e6:.2f} ms)"
                                                            if s.copy_span else ")"))
    print("   histogram (us):", {f"{lo}-{hi}": n for (lo, hi), n in res.interruptions.histogram(PT_COPY_CAUSES).items()
                                 if n})
