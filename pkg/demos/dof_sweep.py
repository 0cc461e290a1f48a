"""Average admitted users against the rank, with a small number of realizations.

Run with ``python3 demos/dof_sweep.py [realizations]`` (default 5).  Prints
the table that ``tim-admission sweep`` writes as CSV: for each rank the
mean over random topologies for the pipeline, brute force and orthogonal
scheduling.  With 5 realizations this takes a minute or two.
"""

import sys

from tim_admission import ExperimentSpec, run_sweep

n = int(sys.argv[1]) if len(sys.argv) > 1 else 5
rows, _ = run_sweep(ExperimentSpec(K=8, link_count=45, realizations=n))

table = {}
for row in rows:
    table.setdefault(row["r"], {})[row["method"]] = row["mean_admitted"]

print(f"mean admitted users over {n} topologies (8 users, 45 links)")
print(f"{'r':>3} {'pipeline':>9} {'oracle':>7} {'baseline':>9}")
for r, means in table.items():
    print(f"{r:>3} {means['pipeline']:>9.2f} {means['oracle']:>7.2f} {means['baseline']:>9.2f}")
