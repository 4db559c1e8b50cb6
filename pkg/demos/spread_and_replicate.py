"""Adding a second site, with and without copying the input there.

Lonestar holds the input and has two slots. Stampede has one slot. Without a
replica, stampede starts early (short queue) and pulls the input for every
task. With a replica, stampede starts later (long queue) while the copy is
made, then reads locally.

    python demos/spread_and_replicate.py
"""

from pathlib import Path

from pilotdata.harness import run_scenario

HERE = Path(__file__).parent / "scenarios"

for kind in ("one-site", "unreplicated", "replicated"):
    m = run_scenario(str(HERE / f"spread-{kind}.json"))
    names = m.summary["pilots"]
    per_pilot = ", ".join(f"{names[pid]}={count}" for pid, count in sorted(m.per_pilot.items()))
    print(f"{kind:13s} makespan {m.makespan:7.3f} s   tasks per pilot: {per_pilot}")
