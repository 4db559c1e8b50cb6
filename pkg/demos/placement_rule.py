"""When to move the data and when to wait for compute next to it.

The rule compares the transfer time T_X against the queue wait T_Q at the
site holding the data. A strictly larger transfer means it is cheaper to
wait (COMPUTE_FIRST); otherwise move the data (DATA_FIRST).

    python demos/placement_rule.py
"""

from pilotdata.topology import tree_from_config
from pilotdata.placement import Workload, decide, estimate

topology = tree_from_config({"labels": ["grid/data", "grid/idle"]})
bandwidths = {"default": 10.0}
queue_at_data = {"grid/data": 300.0}

print(f"{'input size':>10} {'T_X':>8} {'T_Q':>8}  decision")
for size in (500, 2000, 3000, 4000, 10000):
    move = estimate(Workload([size], "grid/data", "grid/idle"), topology, bandwidths)
    wait = estimate(Workload([size], "grid/data", "grid/data"), topology, bandwidths, queue_at_data)
    print(f"{size:>10} {move.T_X:>8.1f} {wait.T_Q_pilot:>8.1f}  {decide(wait.T_Q_pilot, move.T_X)}")
