"""Real processes on this machine: four tasks share one input Data-Unit and
each writes one file into a shared output Data-Unit, which is sealed once
every producer has finished.

    python demos/local_pipeline.py
"""

import tempfile
from pathlib import Path

from pilotdata.harness import run_scenario

HERE = Path(__file__).parent / "scenarios"

with tempfile.TemporaryDirectory(prefix="pilotdata-demo-") as workdir:
    m = run_scenario(str(HERE / "local-pipeline.json"), workdir=workdir)
    for row in m.rows:
        print(f"{row['cu_id']:24s} {row['state']:6s} on {m.summary['pilots'][row['pilot_id']]}")
    sealed = [e for e in m.events if e["kind"] == "du.available"]
    print(f"output Data-Units sealed: {len(sealed)}, files: {[e['files'] for e in sealed]}")
    stores = sorted(p for p in (Path(workdir) / "store").iterdir() if p.is_dir())
    for du_dir in stores:
        print(f"{du_dir.name}: {sorted(f.name for f in du_dir.iterdir())}")
