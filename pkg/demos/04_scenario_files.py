# coding: utf-8

# # Running scenario files
#
# Everything above can also be driven from a TOML file.  run_scenario writes
# latencies.csv, interruptions.csv, throughput.csv and summary.json and
# returns an exit code: 0 fine, 2 inconsistent snapshot, 3 bad config.
# The same thing from a shell is ``python -m forksim run <file>``.

import json
from pathlib import Path

from forksim.cli import run_scenario, sweep

here = Path(__file__).resolve().parent
out = here / "out"

# ## A key inserted while the child is still copying

code = run_scenario(here / "configs" / "new_key_async.toml", out / "new_key_async")
summary = json.loads((out / "new_key_async" / "summary.json").read_text())
print("exit", code, "| consistency", summary["consistency"], "| proactive syncs",
      summary["snapshots"][0]["proactive_syncs"])

# ## The migration script under ODF
#
# The config sets expect_leak, so the stale translation is reported but the
# exit code stays 0.

code = run_scenario(here / "configs" / "shared_table_migration_odf.toml", out / "odf_migration")
summary = json.loads((out / "odf_migration" / "summary.json").read_text())
print("exit", code, "| consistency", summary["consistency"], "| violations", summary["coherence_violations"])

# ## Sweeping the worker count
#
# A small write-heavy scenario written on the fly; the sweep reruns it with
# each worker count and collects one row per run in sweep.csv.

cfg = out / "sweep.toml"
out.mkdir(parents=True, exist_ok=True)
cfg.write_text("""
engine = "Async"
instance_bytes = "64MiB"
vmas = 8

[cost]
service_time = 10000
persist_per_page = 500

[workload]
total_queries = 2000

[[snapshot]]
at = 1000000
""")
for row in sweep(cfg, "workers", [1, 2, 4, 8], out / "workers"):
    lo, hi = row["snapshots"][0]["copy_span_ns"]
    print(f"workers={row['value']}: copy span {(hi - lo) / 1e6:.2f} ms, "
          f"p99 snapshot latency {row['latency']['snapshot']['p99_ns'] / 1e3:.0f} us")
