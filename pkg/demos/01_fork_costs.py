# coding: utf-8

# # What a fork costs
#
# Build an address space, fork it three ways and compare the kernel time the
# parent spends in the call.  Nothing here runs queries; it is just the cost
# model applied to page-table shapes.

import numpy as np

from forksim.fork_engines import async_child_copy, fork_async_parent, fork_default, fork_odf, wp_census
from forksim.runner import Layout, build
from forksim.sim_clock import CostModel
from forksim.vm_core import table_shape

# ## Table shapes
#
# (PGD entries, PUD entries, PMD entries, PTEs) for a few instance sizes.

for gib in (1, 8, 64):
    print(f"{gib:>3} GiB", table_shape(gib << 30))

# ## Default, ODF and Async on the same 8 GiB heap
#
# Each engine gets its own freshly built world so the forks don't interact.

cost = CostModel()
layout = Layout(8 << 30, vmas=8, key_space=0, spare_pages=0)

b = build(layout)
_, default_ns = fork_default(b.world, b.parent)

b = build(layout)
_, odf_ns = fork_odf(b.world, b.parent)

b = build(layout)
session = fork_async_parent(b.world, b.parent, workers=8)

for name, ns in (("Default", default_ns), ("ODF", odf_ns), ("Async parent", session.kernel_time)):
    print(f"{name:<13} {ns / 1e6:8.3f} ms")

# The child still has to copy every PMD after the Async call returns.  One
# table copy is a PMD entry plus its 512 PTEs:

print("one table copy:", cost.table_copy(), "ns")

lo, hi = async_child_copy(session)
print(f"child copy with 8 workers: {(hi - lo) / 1e6:.3f} ms, parent still write-protected PMDs:",
      wp_census(b.world, b.parent))

# ## Where the Default time goes
#
# Almost all of it is copying leaf entries.

_, pud, pmd, pte = table_shape(8 << 30)
parts = np.array([cost.vmas(8), cost.nonleaf(1 + pud + pmd), cost.ptes(pte)])
for label, ns, share in zip(("VMAs", "upper levels", "PTEs"), parts, parts / parts.sum()):
    print(f"{label:<13} {ns / 1e6:8.3f} ms  {share:6.1%}")
