"""Pilot-Agent: pulls Compute-Units for one pilot and runs them through staging,
execution and output staging.

The lifecycle of one CU is written once, as a generator that yields the
duration of each phase. Under the simulated clock the driver turns every
yield into a ``call_later``; with real backends the work already took that
long, so the threaded driver simply exhausts the generator.
"""

import logging
import threading
from dataclasses import dataclass

from .coordination import GLOBAL, key_for
from .errors import ImmutabilityError, IntegrityError, PilotDataError, StagingError, StateError
from .pilots.base import PCState, StagingMode
from .units import CUState, DUState

logger = logging.getLogger(__name__)

PULL_TIMEOUT = 0.05


@dataclass(frozen=True)
class Sandbox:
    """Where a pilot's CUs run: ``<root>/<cu>/`` per CU plus ``<root>/_pilot/``."""

    root: str

    def cu_dir(self, cu_short_id):
        return f"{self.root}/{cu_short_id}"

    @property
    def shared_dir(self):
        return f"{self.root}/_pilot"


def stage_inputs(session, cu, pilot):
    """Make every input DU of ``cu`` visible in its sandbox.

    A replica at the pilot's own label is linked for free; otherwise the
    nearest replica is copied. Returns the staging time.
    """
    seconds = 0.0
    expected = {}
    for du_id in cu.description.input_data:
        du = session.du(du_id)
        if du.state is not DUState.AVAILABLE:
            raise StagingError(f"input {du_id} is {du.state}, not AVAILABLE")
        source = session.nearest_replica(du, pilot.label)
        if source.adaptor is not pilot.adaptor:
            raise StagingError(f"input {du_id} lives on a {source.adaptor.scheme}:// store "
                               f"unreachable from a {pilot.adaptor.scheme}:// pilot")
        link = source.label == pilot.label
        seconds += pilot.adaptor.stage_du(du, source, pilot, cu.id, link)
        session.events.record("agent", "cu.stage", cu.id, du=du_id, source=source.id, link=link)
        expected.update(du.manifest)
    if expected:
        present = pilot.adaptor.sandbox_contents(pilot, cu.id)
        for relpath, entry in expected.items():
            if present.get(relpath) != entry:
                raise IntegrityError(f"staged file {relpath!r} of {cu.id} does not match its manifest")
    return seconds


def stage_outputs(session, cu, pilot):
    """Copy files the CU produced into the home Pilot-Data of its first output DU."""
    outputs = cu.description.output_data
    if not outputs:
        return 0.0
    exclude = {"stdout", "stderr"}
    for du_id in cu.description.input_data:
        exclude.update(session.du(du_id).manifest)
    with session.lock:
        du = session.du(outputs[0])
        if du.state is DUState.AVAILABLE:
            raise ImmutabilityError(f"output Data-Unit {du.id} is already sealed")
        if du.state is not DUState.PENDING:
            raise StagingError(f"output Data-Unit {du.id} is {du.state}")
        pd = session.data_pilot(du.home)
        if pd.adaptor is not pilot.adaptor:
            raise StagingError(f"output {du.id} lives on an unreachable {pd.adaptor.scheme}:// store")
        found = pilot.adaptor.collect_outputs(pilot, cu.id, exclude, session.output_pattern)
        for relpath, entry in found.items():
            du.add_file(relpath, entry)
        session.save_du(du)
    return pilot.adaptor.store_outputs(pilot, cu.id, list(found), du, pd)


class _Running:
    __slots__ = ("timer", "cancel", "guarded")

    def __init__(self):
        self.timer = None
        self.cancel = threading.Event()
        self.guarded = False


class PilotAgent:
    """Runs CUs for one pilot.

    ``deadline`` is the absolute clock time at which the pilot's walltime
    ends (``None`` for unlimited).
    """

    def __init__(self, session, pilot):
        self.session = session
        self.pilot = pilot
        self.deadline = None
        self.running = {}
        self.held = None
        self.stopped = False
        self.settling = 0
        self._wake_pending = False
        self._threads = []

    @property
    def sandbox(self):
        return Sandbox(self.pilot.sandbox_root)

    @property
    def simulated(self):
        return self.session.simulated

    # -- start / stop -----------------------------------------------------------

    def start(self):
        if self.simulated:
            self.try_start()
            return
        for n in range(self.pilot.process_count):
            t = threading.Thread(target=self._worker, name=f"agent-{self.pilot.id}-{n}", daemon=True)
            t.start()
            self._threads.append(t)

    def stop(self, reason="CANCELED"):
        """Stop pulling; fail (walltime) or cancel every unfinished CU."""
        s = self.session
        self.stopped = True
        with s.lock:
            victims = [c for c, r in sorted(self.running.items()) if not r.guarded]
        for cu_id in victims:
            self._abort(cu_id, reason)
        if self.held is not None:
            cu_id, self.held = self.held, None
            s.store.release(cu_id)
            if not s.cu(cu_id).terminal:
                s.enqueue(GLOBAL, cu_id)
        s.store.interrupt()
        for t in self._threads:
            if t is not threading.current_thread():
                t.join(timeout=5)

    def idle_capacity(self):
        return not self.stopped and self.pilot.state is PCState.ACTIVE and self.pilot.free_slots > 0

    def wake(self):
        """Schedule one :meth:`try_start` (simulated clock); repeated calls coalesce."""
        if self.simulated and not self._wake_pending and self.idle_capacity():
            self._wake_pending = True
            self.session.clock.call_soon(self.try_start)

    # -- simulated driver -----------------------------------------------------------

    def try_start(self):
        """Pull and launch CUs while slots are free (simulated clock)."""
        s = self.session
        self._wake_pending = False
        while not self.stopped and self.pilot.state is PCState.ACTIVE and self.pilot.free_slots > 0:
            cu_id = self.held if self.held is not None else s.store.pull(self.pilot.id)
            if cu_id is None:
                return
            self.held = None
            if not self._admit(cu_id):
                continue
            cores = s.cu(cu_id).description.cores
            if cores > self.pilot.free_slots:
                self.held = cu_id
                return
            self._launch(cu_id)

    def _admit(self, cu_id):
        """Drop CUs that are already terminal or can never fit on this pilot."""
        s = self.session
        cu = s.cu(cu_id)
        if cu.terminal:
            s.store.release(cu_id)
            return False
        if cu.description.cores > self.pilot.process_count:
            s.transition_cu(cu_id, CUState.FAILED, reason=(
                f"INSUFFICIENT_SLOTS: needs {cu.description.cores} cores, "
                f"{self.pilot.id} has {self.pilot.process_count}"))
            s.store.release(cu_id)
            s.producers_done(cu_id)
            return False
        return True

    def _launch(self, cu_id):
        s = self.session
        with s.lock:
            self.pilot.free_slots -= s.cu(cu_id).description.cores
            self.running[cu_id] = _Running()
        self._advance(cu_id, self._lifecycle(cu_id))

    def _advance(self, cu_id, steps):
        state = self.running.get(cu_id)
        if state is None:
            return
        try:
            delay = next(steps)
        except StopIteration:
            self._finish(cu_id)
            return
        state.timer = self.session.clock.call_later(delay, self._advance, cu_id, steps)

    # -- threaded driver --------------------------------------------------------------

    def _worker(self):
        s = self.session
        while not self.stopped:
            try:
                cu_id = s.store.pull(self.pilot.id, timeout=PULL_TIMEOUT)
            except PilotDataError:
                return
            if cu_id is None or not self._admit(cu_id):
                continue
            cores = s.cu(cu_id).description.cores
            with s._terminal:
                while self.pilot.free_slots < cores and not self.stopped:
                    s._terminal.wait(PULL_TIMEOUT)
                if self.stopped:
                    s.store.release(cu_id)
                    s.enqueue(GLOBAL, cu_id)
                    return
                self.pilot.free_slots -= cores
                self.running[cu_id] = _Running()
            try:
                for _ in self._lifecycle(cu_id):
                    pass
            except StateError:
                pass  # canceled while a phase was in flight
            except Exception as exc:  # keep the worker alive, surface the failure on the CU
                logger.exception("unexpected failure running %s", cu_id)
                if not s.cu(cu_id).terminal:
                    self._fail(cu_id, f"AGENT: {type(exc).__name__}: {exc}")
            finally:
                self._finish(cu_id)

    # -- lifecycle -------------------------------------------------------------------

    def _remaining(self):
        return None if self.deadline is None else self.deadline - self.session.now()

    def _lifecycle(self, cu_id):
        s = self.session
        pilot = self.pilot
        state = self.running[cu_id]
        actor = "manager" if pilot.staging_mode is StagingMode.PUSH else "agent"
        pilot.adaptor.prepare_sandbox(pilot, cu_id)
        cu = s.transition_cu(cu_id, CUState.STAGING_IN, pilot=pilot.id, actor=actor)
        try:
            staging = stage_inputs(s, cu, pilot)
        except PilotDataError as exc:
            self._fail(cu_id, f"STAGING: {exc}")
            return
        yield staging
        if s.cu(cu_id).terminal:
            return
        s.transition_cu(cu_id, CUState.RUNNING, staging_seconds=staging)
        s.store.incr(f"{key_for(cu_id)}/executions")
        others = sum(1 for c in self.running if c != cu_id and s.cu(c).state is CUState.RUNNING)
        remaining = self._remaining()
        result = pilot.adaptor.execute(pilot, s.cu(cu_id), timeout=remaining, cancel=state.cancel)
        run_seconds = result.seconds
        if self.simulated:
            run_seconds *= 1.0 + pilot.description.slowdown * others
            if remaining is not None and run_seconds > remaining:
                yield remaining
                self._fail(cu_id, "WALLTIME", run_seconds=remaining)
                return
            state.guarded = remaining is not None
        yield run_seconds
        if s.cu(cu_id).terminal:
            return
        if result.canceled:
            s.transition_cu(cu_id, CUState.CANCELED, reason="CANCELED", run_seconds=run_seconds)
            return
        if result.timed_out:
            self._fail(cu_id, "WALLTIME", run_seconds=run_seconds)
            return
        if result.exit_code != 0:
            tail = result.stderr.strip().splitlines()[-5:]
            self._fail(cu_id, f"EXIT {result.exit_code}: " + " | ".join(tail),
                       run_seconds=run_seconds, exit_code=result.exit_code)
            return
        s.transition_cu(cu_id, CUState.STAGING_OUT, run_seconds=run_seconds, exit_code=0)
        try:
            out_seconds = stage_outputs(s, s.cu(cu_id), pilot)
        except PilotDataError as exc:
            self._fail(cu_id, f"STAGING_OUT: {exc}")
            return
        yield out_seconds
        if s.cu(cu_id).terminal:
            return
        s.transition_cu(cu_id, CUState.DONE, stage_out_seconds=out_seconds)

    def _fail(self, cu_id, reason, **changes):
        self.session.transition_cu(cu_id, CUState.FAILED, reason=reason, **changes)

    def _finish(self, cu_id):
        """Release the CU's claim and slots, then settle its output DUs."""
        s = self.session
        with s.lock:
            state = self.running.pop(cu_id, None)
            if state is None:
                return
            self.pilot.free_slots += s.cu(cu_id).description.cores
            self.settling += 1
            s._terminal.notify_all()
        try:
            s.store.release(cu_id)
            self.pilot.adaptor.discard_sandbox(self.pilot, cu_id)
            s.producers_done(cu_id)
        finally:
            with s.lock:
                self.settling -= 1
                s._terminal.notify_all()
        self.wake()

    @property
    def busy(self):
        """True while a CU is running or its outputs are still being settled."""
        return bool(self.running) or self.settling > 0

    def _abort(self, cu_id, reason):
        s = self.session
        state = self.running.get(cu_id)
        if state is None:
            return
        if state.timer is not None:
            state.timer.cancel()
        state.cancel.set()
        if not s.cu(cu_id).terminal:
            target = CUState.CANCELED if reason == "CANCELED" else CUState.FAILED
            s.transition_cu(cu_id, target, reason=reason)
        if self.simulated:
            self._finish(cu_id)

    def cancel(self, cu_id):
        """Cancel a CU this agent has claimed; True if it was found."""
        if cu_id == self.held:
            self.held = None
            self.session.store.release(cu_id)
            self.session.transition_cu(cu_id, CUState.CANCELED, reason="CANCELED")
            self.session.producers_done(cu_id)
            return True
        if cu_id not in self.running:
            return False
        self._abort(cu_id, "CANCELED")
        return True
