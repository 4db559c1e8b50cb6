"""Remote input versus input copied next to the pilot.

Eight tasks each read an 8.3-unit file over a unit-bandwidth link and then
compute for 2.5 s on a single slot. Reading remotely pays the transfer every
time; copying once before the run pays it a single time.

    python demos/co_location.py
"""

from pathlib import Path

from pilotdata.harness import run_scenario

HERE = Path(__file__).parent / "scenarios"

remote = run_scenario(str(HERE / "remote-input.json"))
local = run_scenario(str(HERE / "co-located-input.json"))

print(f"input read remotely : makespan {remote.makespan:7.2f} s, staging {remote.total_staging:6.2f} s")
print(f"input copied first  : makespan {local.makespan:7.2f} s, staging {local.total_staging:6.2f} s "
      f"(copy took {local.T_D:.2f} s)")
print(f"speed-up            : {remote.makespan / local.makespan:.2f}x")
