"""Command-line entry point: ``pilotdata <subcommand>``.

Exit codes: 0 success, 2 validation failure, 1 anything unexpected.
Machine-readable output goes to stdout, diagnostics to stderr.
"""

import argparse
import contextlib
import fcntl
import json
import os
import signal
import sys
import threading

from . import harness
from .coordination import SUBMISSIONS, CoordinationStore, StoreClient, StoreServer, key_for
from .errors import PilotDataError, ValidationError
from .units import (
    ComputeUnit,
    ComputeUnitDescription,
    DataUnit,
    DataUnitDescription,
    validate_description,
)

EXIT_OK, EXIT_UNEXPECTED, EXIT_VALIDATION = 0, 1, 2


class LockedError(PilotDataError):
    pass


def _paths(store_dir):
    return {
        "lock": os.path.join(store_dir, "LOCK"),
        "socket": os.path.join(store_dir, "store.sock"),
        "snapshot": os.path.join(store_dir, "store.snap"),
    }


@contextlib.contextmanager
def _locked(store_dir):
    os.makedirs(store_dir, exist_ok=True)
    fh = open(_paths(store_dir)["lock"], "a+")
    try:
        fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
    except BlockingIOError:
        fh.close()
        raise LockedError(f"store at {store_dir} is locked by another process") from None
    try:
        yield
    finally:
        fcntl.flock(fh, fcntl.LOCK_UN)
        fh.close()


def _open_store(store_dir, snapshot_every=None):
    snap = _paths(store_dir)["snapshot"]
    if os.path.exists(snap):
        return CoordinationStore.restore(snap, snapshot_every=snapshot_every)
    return CoordinationStore(snapshot_path=snap, snapshot_every=snapshot_every)


def _store_dir(args):
    return os.environ.get("PS_STORE") or args.store_path


# -- subcommands -----------------------------------------------------------------------


def cmd_serve(args):
    store_dir = _store_dir(args)
    if not store_dir:
        raise ValidationError("serve needs --store-path or PS_STORE")
    with _locked(store_dir):
        store = _open_store(store_dir, args.snapshot_every)
        store.register_queue(SUBMISSIONS)
        paths = _paths(store_dir)
        server = StoreServer(store, paths["socket"], after_request=store.maybe_snapshot)
        def shutdown(*_):
            threading.Thread(target=server.shutdown, daemon=True).start()

        signal.signal(signal.SIGTERM, shutdown)
        signal.signal(signal.SIGINT, shutdown)
        print(json.dumps({"serving": paths["socket"], "store": store.name}), flush=True)
        try:
            server.serve_forever(poll_interval=0.1)
        finally:
            server.server_close()
            store.snapshot()
            store.close()
            with contextlib.suppress(FileNotFoundError):
                os.unlink(paths["socket"])
    return EXIT_OK


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON ({exc})") from None


def _submit_to(store, kind, data):
    prefix = f"ps://{store.store_name()}/"
    if kind == "cu":
        desc = ComputeUnitDescription.from_dict(data)
        known = {prefix + k for k in store.keys("du/") if k.count("/") == 1}
        problems = validate_description(desc, known_dus=known)
        if problems:
            raise ValidationError(problems)
        unit_id = store.next_id("cu")
        store.put_state(key_for(unit_id), ComputeUnit(unit_id, desc).to_record())
        store.register_queue(SUBMISSIONS)
        store.enqueue(SUBMISSIONS, unit_id)
    else:
        desc = DataUnitDescription.from_dict(data)
        problems = validate_description(desc)
        if problems:
            raise ValidationError(problems)
        unit_id = store.next_id("du")
        store.put_state(key_for(unit_id), DataUnit(unit_id, desc).to_record())
    return unit_id


def cmd_submit(args):
    data = _read_json(args.file)
    if not isinstance(data, dict):
        raise ValidationError(f"{args.file}: description must be a JSON object")
    store_dir = _store_dir(args)
    if not store_dir:
        raise ValidationError("submit needs --store-path or PS_STORE")
    sock = _paths(store_dir)["socket"]
    client = None
    if os.path.exists(sock):
        with contextlib.suppress(OSError):
            client = StoreClient(sock)
    if client is not None:
        try:
            unit_id = _submit_to(client, args.type, data)
        finally:
            client.close()
    else:
        with _locked(store_dir):
            store = _open_store(store_dir)
            try:
                unit_id = _submit_to(store, args.type, data)
                store.snapshot()
            finally:
                store.close()
    print(unit_id)
    return EXIT_OK


def _fail_validation(problems):
    for p in problems:
        print(f"error: {p}", file=sys.stderr)
    return EXIT_VALIDATION


def cmd_validate(args):
    problems = harness.validate_scenario(harness.load_scenario(args.scenario))
    if problems:
        return _fail_validation(problems)
    print(json.dumps({"valid": True, "scenario": args.scenario}))
    return EXIT_OK


def cmd_run_scenario(args):
    scenario = harness.load_scenario(args.scenario)
    if args.seed is not None:
        scenario["seed"] = args.seed
    problems = harness.validate_scenario(scenario)
    if problems:
        return _fail_validation(problems)
    os.makedirs(args.out, exist_ok=True)
    audit = os.path.join(args.out, "decisions.jsonl")
    if os.path.exists(audit):
        os.unlink(audit)
    metrics = harness.run_scenario(scenario, audit_path=audit)
    harness.report(metrics, os.path.join(args.out, "metrics.csv"), "csv")
    harness.report(metrics, os.path.join(args.out, "metrics.jsonl"), "jsonl")
    with open(os.path.join(args.out, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(metrics.summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(json.dumps(metrics.summary, sort_keys=True))
    return EXIT_OK


def cmd_compare(args):
    scenario = harness.load_scenario(args.scenario)
    problems = harness.validate_scenario(scenario)
    if problems:
        return _fail_validation(problems)
    print(json.dumps(harness.compare(scenario, args.policy_a, args.policy_b, args.seed), sort_keys=True))
    return EXIT_OK


def cmd_report(args):
    source = os.path.join(args.run, "metrics.jsonl")
    if not os.path.exists(source):
        raise ValidationError(f"{args.run} holds no metrics.jsonl (run run-scenario first)")
    metrics = harness.load_metrics(source)
    output = args.output or os.path.join(args.run, f"report.{args.format}")
    harness.report(metrics, output, args.format)
    print(output)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="pilotdata", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="host a coordination store on a Unix socket")
    p.add_argument("--store-path", help="directory for the socket, lock and snapshot (env PS_STORE)")
    p.add_argument("--snapshot-every", type=float, default=None,
                   help="snapshot period in seconds (default: write-through journal)")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("submit", help="submit a CU or DU description")
    p.add_argument("--type", choices=["cu", "du"], required=True)
    p.add_argument("--file", required=True, help="JSON description")
    p.add_argument("--store-path", help="store directory (env PS_STORE)")
    p.set_defaults(func=cmd_submit)

    p = sub.add_parser("run-scenario", help="run a scenario and write metrics")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_run_scenario)

    p = sub.add_parser("compare", help="run a scenario under two policies")
    p.add_argument("--scenario", required=True)
    p.add_argument("--policy-a", required=True)
    p.add_argument("--policy-b", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("report", help="re-emit the metrics of a previous run")
    p.add_argument("--run", required=True, help="directory written by run-scenario")
    p.add_argument("--format", choices=["csv", "jsonl"], default="csv")
    p.add_argument("--output", default=None)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("validate", help="check a scenario without running it")
    p.add_argument("--scenario", required=True)
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        return _fail_validation(exc.violations)
    except (LockedError, PilotDataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNEXPECTED
    except Exception as exc:  # last-resort guard so scripts always get exit code 1
        print(f"unexpected error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
