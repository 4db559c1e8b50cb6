import json

import pytest

from scenarios import co_location, compute_only, data_heavy
from pilotdata.errors import ValidationError
from pilotdata.harness import CSV_COLUMNS, compare, load_metrics, load_scenario, report, run_scenario, validate_scenario


def test_valid_scenarios_have_no_problems():
    for scenario in (co_location(), data_heavy(), compute_only()):
        assert validate_scenario(scenario) == []


@pytest.mark.parametrize("mutate,needle", [
    (lambda s: s["pilot_computes"][0].update(service_url="sim://nowhere/x"), "not in the topology"),
    (lambda s: s["workload"][0].update(input_data=["ghost"]), "unknown Data-Unit"),
    (lambda s: s["workload"][0].update(cores=0), "cores"),
    (lambda s: s.update(colour="red"), "unknown scenario field"),
    (lambda s: s["data_units"][0].update(pilot_data="nope"), "unknown pilot_data"),
    (lambda s: s.update(scheduler={"policy": "BEST"}), "scheduler"),
    (lambda s: s["pilot_computes"][0].update(service_url="local:///tmp/x"), "does not match backend"),
])
def test_validation_catches(mutate, needle):
    scenario = co_location()
    mutate(scenario)
    problems = validate_scenario(scenario)
    assert any(needle in p for p in problems), problems
    with pytest.raises(ValidationError):
        run_scenario(scenario)


def test_load_scenario_accepts_path_text_and_dict(tmp_path):
    path = tmp_path / "s.json"
    path.write_text(json.dumps(co_location()))
    assert load_scenario(str(path)) == load_scenario(json.dumps(co_location())) == load_scenario(co_location())
    with pytest.raises(ValidationError):
        load_scenario(str(tmp_path / "missing.json"))


def test_serial_makespan_closed_form():
    m = run_scenario(co_location(count=3, size=2.0, run=5.0))
    assert m.makespan == pytest.approx(3 * (2.0 + 5.0), abs=1e-9)
    assert [r["t_done"] for r in m.rows] == pytest.approx([7, 14, 21], abs=1e-9)
    assert [r["t_queue"] for r in m.rows] == pytest.approx([0, 7, 14], abs=1e-9)


def test_conservation():
    m = run_scenario(data_heavy())
    assert len(m.rows) == len({r["cu_id"] for r in m.rows}) == 12
    assert sum(m.per_pilot.values()) == 12
    assert all(r["state"] == "DONE" for r in m.rows)


def test_three_cu_csv(tmp_path):
    m = run_scenario(co_location(count=3))
    path = report(m, tmp_path / "m.csv")
    lines = open(path).read().splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    assert len(lines) == 4


def test_jsonl_round_trip(tmp_path):
    m = run_scenario(data_heavy())
    path = report(m, tmp_path / "m.jsonl", "jsonl")
    assert load_metrics(path) == m


def test_unwritable_report_path(tmp_path):
    m = run_scenario(co_location(count=1))
    with pytest.raises(OSError):
        report(m, tmp_path / "missing-dir" / "m.csv")
    with pytest.raises(ValidationError):
        report(m, tmp_path / "m.xml", "xml")


def test_same_seed_same_bytes(tmp_path):
    a = report(run_scenario(data_heavy(), seed=5), tmp_path / "a.csv")
    b = report(run_scenario(data_heavy(), seed=5), tmp_path / "b.csv")
    assert open(a, "rb").read() == open(b, "rb").read()
    ja = report(run_scenario(data_heavy(), seed=5), tmp_path / "a.jsonl", "jsonl")
    jb = report(run_scenario(data_heavy(), seed=5), tmp_path / "b.jsonl", "jsonl")
    assert open(ja, "rb").read() == open(jb, "rb").read()


def expected_staging(metrics, scenario):
    """Oracle: a CU stages for free on the data's own site and pays
    size / bandwidth anywhere else."""
    size = scenario["data_units"][0]["files"][0]["size"]
    data_pilot = next(p for p, name in metrics.summary["pilots"].items() if name == "lonestar")
    return sum(0.0 if r["pilot_id"] == data_pilot else size / 1.0 for r in metrics.rows)


def test_compare_aware_against_random():
    scenario = data_heavy()
    delta = compare(scenario, "AFFINITY_AWARE", "RANDOM", seed=3)
    aware = run_scenario(scenario, 3, policy="AFFINITY_AWARE")
    rand = run_scenario(scenario, 3, policy="RANDOM")
    assert delta["staging_a"] == expected_staging(aware, scenario)
    assert delta["staging_b"] == expected_staging(rand, scenario)
    assert delta["staging_delta"] > 0


def test_compare_identical_policies_is_zero():
    delta = compare(data_heavy(), "RANDOM", "RANDOM", seed=9)
    assert delta["makespan_delta"] == 0 and delta["staging_delta"] == 0


def test_compare_compute_only_has_no_staging():
    delta = compare(compute_only(), "AFFINITY_AWARE", "RANDOM", seed=1)
    assert delta["staging_delta"] == 0 and delta["staging_a"] == 0


def test_output_template_expansion():
    scenario = co_location(count=2)
    scenario["data_units"].append({"name": "results", "pilot_data": "scratch", "files": []})
    scenario["workload"][0].update(arguments=["out=part-{i}.txt"], output_data=["results"])
    m = run_scenario(scenario)
    assert all(r["state"] == "DONE" for r in m.rows)
    assert any(e["kind"] == "du.available" and e["files"] == 2 for e in m.events)


def test_local_backend_scenario(tmp_path):
    scenario = {
        "backend": "local",
        "pilot_data": [{"name": "store", "service_url": "local://{workdir}/store"}],
        "pilot_computes": [{"name": "pc", "service_url": "local://{workdir}/sandbox", "process_count": 2}],
        "data_units": [{"name": "in", "pilot_data": "store", "files": [{"name": "a.bin", "size": 1024}]},
                       {"name": "out", "pilot_data": "store", "files": []}],
        "workload": [{"count": 3, "executable": "synthetic:0.05", "arguments": ["out=r{i}"],
                      "input_data": ["in"], "output_data": ["out"]}],
        "timeout": 60,
    }
    m = run_scenario(scenario, workdir=str(tmp_path))
    assert [r["state"] for r in m.rows] == ["DONE"] * 3
    sealed = [e for e in m.events if e["kind"] == "du.available"]
    assert [e["files"] for e in sealed] == [3]
    assert sorted(p.name for p in (tmp_path / "store" / "du-2").iterdir()) == ["r0", "r1", "r2"]


def test_stranded_cus_are_reported():
    scenario = co_location(count=2)
    scenario["pilot_computes"][0]["walltime"] = 3
    m = run_scenario(scenario)
    reasons = [r["reason"] for r in m.rows]
    assert reasons[0] == "WALLTIME" and reasons[1] == "STRANDED"
