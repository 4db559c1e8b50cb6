"""Scenario runner and metrics.

A scenario is a JSON document::

    {
      "seed": 0,
      "backend": "sim",                       # or "local"
      "topology": {"labels": [...], "weights": {...}},
      "bandwidths": {"default": 1.0, "links": [["a", "b", 2.0]]},
      "t_register": 0.0,
      "pilot_data": [{"name": "pd-a", "service_url": "sim://site/a"}],
      "pilot_computes": [{"name": "pc-a", "service_url": "sim://site/a",
                          "process_count": 1, "queue_model": 0}],
      "data_units": [{"name": "input", "pilot_data": "pd-a",
                      "files": [{"name": "in.dat", "size": 8.3, "at": "site/b"}]}],
      "replication": [{"du": "input", "targets": ["pd-b"], "mode": "GROUP",
                       "phase": "setup"}],
      "workload": [{"count": 8, "executable": "synthetic:1",
                    "arguments": ["out=part-{i}"], "input_data": ["input"]}],
      "scheduler": {"policy": "AFFINITY_AWARE"},
      "include_setup": false
    }

Data-Units and "setup" replications are created before the clock starts
and their time is reported as ``T_D``. With ``include_setup`` the workload
is submitted only once that data is in place, so the makespan covers it.
"run" replications happen on the clock from t=0. Pilots start queueing at
t=0 either way.
"""

import csv
import io
import json
import os
import random
import tempfile
import time
from dataclasses import dataclass, field

from .errors import PilotDataError, ValidationError
from .pilots import PilotComputeService, PilotDataService, ReplicationMode, sim_ref
from .pilots.base import BandwidthMatrix, PilotComputeDescription, PilotDataDescription, split_service_url
from .scheduler import ComputeDataService, SchedulerConfig
from .session import Session
from .topology import AffinityLabel, tree_from_config
from .units import ComputeUnitDescription, CUState, validate_description

CSV_COLUMNS = ["cu_id", "pilot_id", "t_submit", "t_queue", "staging_s", "run_s", "t_done"]

_TOP_LEVEL = {"name", "description", "seed", "backend", "topology", "bandwidths", "t_register",
              "pilot_data", "pilot_computes", "data_units", "replication", "workload",
              "scheduler", "include_setup", "timeout", "output_pattern"}
_TEMPLATE_KEYS = {"count", "executable", "arguments", "cores", "input_data", "output_data",
                  "affinity", "wall_time_estimate", "name", "submit_at"}


def load_scenario(source):
    """Read a scenario from a path, a JSON string or a dict (copied)."""
    if isinstance(source, dict):
        return json.loads(json.dumps(source))
    if isinstance(source, (str, os.PathLike)) and os.path.exists(source):
        with open(source, encoding="utf-8") as fh:
            return json.load(fh)
    if isinstance(source, str):
        try:
            return json.loads(source)
        except json.JSONDecodeError:
            pass
    raise ValidationError(f"cannot read scenario {source!r}")


def _label_of(url, affinity):
    scheme, address = split_service_url(url)
    if affinity is not None:
        return AffinityLabel.parse(affinity)
    if scheme == "sim":
        return AffinityLabel.parse(address)
    return None


def validate_scenario(scenario):
    """Every problem found in ``scenario`` (empty list when it can run)."""
    problems = []
    if not isinstance(scenario, dict):
        return ["scenario must be a JSON object"]
    for key in sorted(set(scenario) - _TOP_LEVEL):
        problems.append(f"unknown scenario field {key!r}")
    backend = scenario.get("backend", "sim")
    if backend not in ("sim", "local"):
        problems.append(f"backend must be 'sim' or 'local', got {backend!r}")
    try:
        topology = tree_from_config(scenario.get("topology", {"labels": []}))
    except PilotDataError as exc:
        return problems + [f"topology: {exc}"]

    def check_label(where, label):
        if label is not None and backend == "sim" and label not in topology:
            problems.append(f"{where}: label {str(label)!r} is not in the topology")

    try:
        BandwidthMatrix.from_config(scenario.get("bandwidths"))
    except PilotDataError as exc:
        problems.append(f"bandwidths: {exc}")

    names = {}
    for kind, key in (("pilot_data", "pilot_data"), ("pilot_computes", "pilot_computes")):
        for n, entry in enumerate(scenario.get(key, [])):
            where = f"{kind}[{n}]"
            name = entry.get("name", f"{kind}-{n}")
            if name in names:
                problems.append(f"{where}: duplicate name {name!r}")
            names[name] = kind
            desc = {k: v for k, v in entry.items() if k != "name"}
            try:
                cls = PilotDataDescription if kind == "pilot_data" else PilotComputeDescription
                obj = cls.from_dict(desc)
                problems.extend(f"{where}: {p}" for p in obj.validate())
                scheme, _ = split_service_url(obj.service_url)
                if scheme != backend:
                    problems.append(f"{where}: scheme {scheme!r} does not match backend {backend!r}")
                check_label(where, _label_of(obj.service_url, obj.affinity))
            except PilotDataError as exc:
                problems.append(f"{where}: {exc}")
            except TypeError as exc:
                problems.append(f"{where}: {exc}")

    du_names = set()
    for n, entry in enumerate(scenario.get("data_units", [])):
        where = f"data_units[{n}]"
        name = entry.get("name")
        if not name:
            problems.append(f"{where}: needs a name")
        elif name in du_names:
            problems.append(f"{where}: duplicate name {name!r}")
        du_names.add(name)
        if names.get(entry.get("pilot_data")) != "pilot_data":
            problems.append(f"{where}: unknown pilot_data {entry.get('pilot_data')!r}")
        basenames = set()
        for f in entry.get("files", []):
            if not f.get("name") or not isinstance(f.get("size"), (int, float)) or f["size"] < 0:
                problems.append(f"{where}: each file needs a name and a size ≥ 0")
                continue
            if f["name"] in basenames:
                problems.append(f"{where}: duplicate basename {f['name']!r}")
            basenames.add(f["name"])
            if f.get("at") is not None:
                try:
                    check_label(where, AffinityLabel.parse(f["at"]))
                except PilotDataError as exc:
                    problems.append(f"{where}: {exc}")

    for n, entry in enumerate(scenario.get("replication", [])):
        where = f"replication[{n}]"
        if entry.get("du") not in du_names:
            problems.append(f"{where}: unknown data unit {entry.get('du')!r}")
        for t in entry.get("targets", []):
            if names.get(t) != "pilot_data":
                problems.append(f"{where}: unknown pilot_data {t!r}")
        if str(entry.get("mode", "SEQUENTIAL")).upper() not in ("SEQUENTIAL", "GROUP"):
            problems.append(f"{where}: mode must be SEQUENTIAL or GROUP")
        if entry.get("phase", "setup") not in ("setup", "run"):
            problems.append(f"{where}: phase must be 'setup' or 'run'")

    for n, tmpl in enumerate(scenario.get("workload", [])):
        where = f"workload[{n}]"
        for key in sorted(set(tmpl) - _TEMPLATE_KEYS):
            problems.append(f"{where}: unknown field {key!r}")
        count = tmpl.get("count", 1)
        if isinstance(count, bool) or not isinstance(count, int) or count < 0:
            problems.append(f"{where}: count must be an integer ≥ 0")
        if not tmpl.get("submit_at", 0) >= 0:
            problems.append(f"{where}: submit_at must be ≥ 0")
        desc = {k: v for k, v in tmpl.items() if k in _TEMPLATE_KEYS - {"count", "submit_at"}}
        try:
            cud = ComputeUnitDescription.from_dict(desc)
            problems.extend(f"{where}: {p}" for p in validate_description(cud, known_dus=du_names))
            check_label(where, AffinityLabel.parse(cud.affinity) if cud.affinity else None)
        except PilotDataError as exc:
            problems.append(f"{where}: {exc}")
        except TypeError as exc:
            problems.append(f"{where}: {exc}")

    try:
        SchedulerConfig.from_dict(scenario.get("scheduler"))
    except (PilotDataError, TypeError) as exc:
        problems.append(f"scheduler: {exc}")
    return problems


@dataclass
class RunMetrics:
    makespan: float
    rows: list
    per_pilot: dict
    T_D: float
    summary: dict
    events: list = field(default_factory=list)
    decisions: list = field(default_factory=list)

    @property
    def total_staging(self):
        return sum(r["staging_s"] for r in self.rows)

    def row(self, cu_id):
        return next(r for r in self.rows if r["cu_id"] == cu_id)


def _materialize_local_files(workdir, du_name, files, seed):
    """Write deterministic pseudo-random files for a local-backend Data-Unit."""
    src = os.path.join(workdir, "sources", du_name)
    os.makedirs(src, exist_ok=True)
    paths = []
    for f in files:
        rng = random.Random(f"{seed}:{du_name}:{f['name']}")
        path = os.path.join(src, f["name"])
        with open(path, "wb") as fh:
            fh.write(rng.randbytes(int(f["size"])))
        paths.append(path)
    return paths


def _expand(value, i):
    if isinstance(value, str):
        return value.replace("{i}", str(i))
    if isinstance(value, list):
        return [_expand(v, i) for v in value]
    return value


def run_scenario(source, seed=None, *, policy=None, workdir=None, audit_path=None):
    """Run a scenario to completion and return its :class:`RunMetrics`.

    ``seed`` and ``policy`` override the scenario's own values.
    """
    scenario = load_scenario(source)
    if seed is not None:
        scenario["seed"] = seed
    if policy is not None:
        scenario.setdefault("scheduler", {})
        scenario["scheduler"] = dict(scenario["scheduler"], policy=policy)
    problems = validate_scenario(scenario)
    if problems:
        raise ValidationError(problems)
    seed = scenario.get("seed", 0)
    backend = scenario.get("backend", "sim")
    cleanup = None
    if backend == "local" and workdir is None:
        cleanup = tempfile.TemporaryDirectory(prefix="pilotdata-run-")
        workdir = cleanup.name
    if workdir:
        scenario = json.loads(json.dumps(scenario).replace("{workdir}", workdir))
    try:
        return _run(scenario, seed, backend, workdir, audit_path)
    finally:
        if cleanup is not None:
            cleanup.cleanup()


def _run(scenario, seed, backend, workdir, audit_path):
    simulated = backend == "sim"
    topology = tree_from_config(scenario.get("topology", {"labels": []}))
    session = Session(topology, scenario.get("bandwidths"), simulated=simulated,
                      t_register=scenario.get("t_register"), seed=seed, workdir=workdir,
                      output_pattern=scenario.get("output_pattern", "*"))
    sched = dict(scenario.get("scheduler") or {})
    sched.setdefault("seed", seed)
    manager = ComputeDataService(session, SchedulerConfig.from_dict(sched), audit_path=audit_path)
    pcs, pds = PilotComputeService(session), PilotDataService(session)
    try:
        pd_by_name = {}
        for n, entry in enumerate(scenario.get("pilot_data", [])):
            desc = {k: v for k, v in entry.items() if k != "name"}
            pd_by_name[entry.get("name", f"pilot_data-{n}")] = pds.create_pilot_data(desc)

        du_by_name, ready = {}, {}
        for entry in scenario.get("data_units", []):
            files = entry.get("files", [])
            if simulated:
                refs = [sim_ref(f["name"], f["size"], f.get("at")) for f in files]
            else:
                refs = _materialize_local_files(workdir, entry["name"], files, seed)
            du = pds.put_du(pd_by_name[entry["pilot_data"]], {"file_refs": refs, "name": entry["name"]})
            du_by_name[entry["name"]] = du
            ready[entry["name"]] = du.staging_seconds

        pilot_names = {}
        for n, entry in enumerate(scenario.get("pilot_computes", [])):
            desc = {k: v for k, v in entry.items() if k != "name"}
            pilot = pcs.create_pilot(desc)
            pilot_names[pilot.id] = entry.get("name", f"pilot_computes-{n}")

        replication_reports = []
        for entry in scenario.get("replication", []):
            du = du_by_name[entry["du"]]
            timed = entry.get("phase", "setup") == "run"
            report = pds.replicate(du, [pd_by_name[t] for t in entry["targets"]],
                                   ReplicationMode(str(entry.get("mode", "SEQUENTIAL")).upper()),
                                   timed=timed)
            replication_reports.append({"du": entry["du"], "mode": report.mode, "phase": entry.get("phase", "setup"),
                                        "total_s": report.total_seconds, "failed": report.failed})
            if not timed:
                ready[entry["du"]] += report.total_seconds
        t_d = max(ready.values(), default=0.0)
        offset = t_d if scenario.get("include_setup") else 0.0

        def submit(desc):
            manager.submit(desc)

        index = 0
        for tmpl in scenario.get("workload", []):
            for _ in range(tmpl.get("count", 1)):
                desc = {k: _expand(v, index) for k, v in tmpl.items()
                        if k not in ("count", "submit_at")}
                desc["input_data"] = [du_by_name[d].id for d in desc.get("input_data", [])]
                desc["output_data"] = [du_by_name[d].id for d in desc.get("output_data", [])]
                when = offset + tmpl.get("submit_at", 0)
                if when == 0:
                    submit(desc)
                else:
                    session.clock.call_at(when, submit, desc)
                index += 1

        if simulated:
            session.run()
        else:
            _wait_for_submissions(session, index, scenario.get("timeout", 300))
            session.run(timeout=scenario.get("timeout", 300))
        for cu_id in sorted(session.cus):
            if not session.cu(cu_id).terminal:
                session.store.remove(cu_id)
                session.transition_cu(cu_id, CUState.FAILED, actor="harness", reason="STRANDED")
        return _collect(session, manager, pilot_names, t_d, replication_reports, scenario, seed)
    finally:
        session.close()


def _wait_for_submissions(session, expected, timeout):
    deadline = time.monotonic() + timeout
    while len(session.cus) < expected and time.monotonic() < deadline:
        time.sleep(0.01)


def _collect(session, manager, pilot_names, t_d, replication_reports, scenario, seed):
    rows = []
    per_pilot = {p: 0 for p in sorted(session.pilots)}
    for cu_id in sorted(session.cus, key=_numeric_id):
        cu = session.cu(cu_id)
        ts = cu.timestamps
        t_done = ts.get(cu.state.value, 0.0)
        queued, started = ts.get("QUEUED"), ts.get("STAGING_IN")
        rows.append({
            "cu_id": cu_id,
            "pilot_id": cu.assigned_pilot or "",
            "t_submit": ts.get("NEW", 0.0),
            "t_queue": (started - queued) if queued is not None and started is not None else 0.0,
            "staging_s": cu.staging_seconds,
            "run_s": cu.run_seconds,
            "t_done": t_done,
            "state": cu.state.value,
            "reason": cu.reason,
        })
        if cu.state is CUState.DONE:
            per_pilot[cu.assigned_pilot] = per_pilot.get(cu.assigned_pilot, 0) + 1
    makespan = max((r["t_done"] for r in rows), default=0.0)
    states = {}
    for r in rows:
        states[r["state"]] = states.get(r["state"], 0) + 1
    summary = {
        "name": scenario.get("name"),
        "seed": seed,
        "backend": scenario.get("backend", "sim"),
        "policy": manager.config.policy.value,
        "makespan": makespan,
        "T_D": t_d,
        "cus": len(rows),
        "states": dict(sorted(states.items())),
        "staging_total": sum(r["staging_s"] for r in rows),
        "pilots": {p: pilot_names.get(p, p) for p in sorted(session.pilots)},
        "replication": replication_reports,
    }
    events = [dict(e) for e in session.events] if session.simulated else \
        [dict(e, t=round(e["t"], 6)) for e in session.events]
    return RunMetrics(makespan, rows, per_pilot, t_d, summary, events,
                      [d.to_json() for d in manager.decisions])


def _numeric_id(unit_id):
    head, _, n = unit_id.rpartition("/")
    return (head, int(n)) if n.isdigit() else (head, 0)


# -- reports ---------------------------------------------------------------------


def _csv_text(metrics):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in metrics.rows:
        writer.writerow([repr(v) if isinstance(v, float) else v for v in (row[c] for c in CSV_COLUMNS)])
    return buf.getvalue()


def _jsonl_text(metrics):
    lines = [{"type": "summary", "makespan": metrics.makespan, "T_D": metrics.T_D,
              "per_pilot": metrics.per_pilot, "summary": metrics.summary}]
    lines += [{"type": "cu", **row} for row in metrics.rows]
    lines += [{"type": "decision", **d} for d in metrics.decisions]
    lines += [{"type": "event", **e} for e in metrics.events]
    return "".join(json.dumps(line, sort_keys=True) + "\n" for line in lines)


def report(metrics, path, fmt="csv"):
    """Write ``metrics`` as CSV (one row per CU) or JSON lines; returns the path."""
    if fmt == "csv":
        text = _csv_text(metrics)
    elif fmt == "jsonl":
        text = _jsonl_text(metrics)
    else:
        raise ValidationError(f"unknown report format {fmt!r}")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return path


def load_metrics(path):
    """Read a JSON-lines report back into :class:`RunMetrics`."""
    rows, decisions, events, head = [], [], [], None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            kind = rec.pop("type")
            if kind == "summary":
                head = rec
            elif kind == "cu":
                rows.append(rec)
            elif kind == "decision":
                decisions.append(rec)
            elif kind == "event":
                events.append(rec)
    if head is None:
        raise ValidationError(f"{path} has no summary record")
    return RunMetrics(head["makespan"], rows, head["per_pilot"], head["T_D"], head["summary"],
                      events, decisions)


def compare(source, policy_a, policy_b, seed=None):
    """Run one scenario under two policies with the same seed; deltas are B − A."""
    a = run_scenario(source, seed, policy=policy_a)
    b = run_scenario(source, seed, policy=policy_b)
    return {
        "policy_a": str(policy_a),
        "policy_b": str(policy_b),
        "makespan_a": a.makespan,
        "makespan_b": b.makespan,
        "makespan_delta": b.makespan - a.makespan,
        "staging_a": a.total_staging,
        "staging_b": b.total_staging,
        "staging_delta": b.total_staging - a.total_staging,
    }
