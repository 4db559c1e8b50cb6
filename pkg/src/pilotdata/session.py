"""Runtime context shared by the manager, the pilot services and the agents."""

import logging
import random
import threading
import time

from .coordination import GLOBAL, CoordinationStore, key_for
from .errors import AdaptorError, NotFoundError, StagingError
from .pilots.base import BandwidthMatrix, PCState, adaptor_factory
from .runtime import EventLog, RealClock, SimClock
from .topology import TopologyTree
from .units import ACTIVE_STATES, ComputeUnit, CUState, DUState, seal, transition

logger = logging.getLogger(__name__)

DEFAULT_T_REGISTER = 0.01


class Session:
    """Holds the clock, store, topology and every live pilot and unit.

    The coordination store is authoritative for unit state; the ``cus`` and
    ``dus`` dicts are caches refreshed on every write.
    """

    def __init__(self, topology=None, bandwidths=None, *, simulated=True, store=None,
                 t_register=None, seed=0, workdir=None, output_pattern="*", group_workers=4):
        self.clock = SimClock() if simulated else RealClock()
        self.simulated = simulated
        self.topology = topology if topology is not None else TopologyTree()
        self.bandwidths = BandwidthMatrix.from_config(bandwidths)
        self.store = store if store is not None else CoordinationStore()
        if t_register is None:
            t_register = DEFAULT_T_REGISTER if simulated else 0.0
        self.t_register = t_register
        self.seed = seed
        self.rng = random.Random(seed)
        self.workdir = workdir
        self.output_pattern = output_pattern
        self.group_workers = group_workers
        self.events = EventLog(self.clock)
        self.lock = threading.RLock()
        self.pilots = {}
        self.pilot_data = {}
        self.dus = {}
        self.cus = {}
        self.agents = {}
        self.producers = {}
        self.manager = None
        self._adaptors = {}
        self._terminal = threading.Condition(self.lock)

    @classmethod
    def simulated_session(cls, topology=None, bandwidths=None, **kwargs):
        return cls(topology, bandwidths, simulated=True, **kwargs)

    @classmethod
    def local_session(cls, topology=None, **kwargs):
        return cls(topology, None, simulated=False, **kwargs)

    # -- adaptors ----------------------------------------------------------------

    def adaptor(self, scheme):
        if scheme not in self._adaptors:
            adaptor = adaptor_factory(scheme)(self)
            if adaptor.simulated != self.simulated:
                kind = "simulated" if self.simulated else "real-time"
                raise AdaptorError(f"scheme {scheme!r} cannot be used in a {kind} session")
            self._adaptors[scheme] = adaptor
        return self._adaptors[scheme]

    def ensure_label(self, label):
        self.topology = self.topology.insert_label(label)

    # -- lookups -----------------------------------------------------------------

    def now(self):
        return self.clock.now()

    def cu(self, cu_id):
        try:
            return self.cus[cu_id]
        except KeyError:
            rec = self.store.get_state(key_for(cu_id))
            cu = ComputeUnit.from_record(rec)
            self.cus[cu_id] = cu
            return cu

    def du(self, du_id):
        try:
            return self.dus[du_id]
        except KeyError:
            raise NotFoundError(f"unknown Data-Unit {du_id!r}") from None

    def pilot(self, pilot_id):
        try:
            return self.pilots[pilot_id]
        except KeyError:
            raise NotFoundError(f"unknown pilot {pilot_id!r}") from None

    def data_pilot(self, pd_id):
        try:
            return self.pilot_data[pd_id]
        except KeyError:
            raise NotFoundError(f"unknown Pilot-Data {pd_id!r}") from None

    def nearest_replica(self, du, label, pool=None):
        """PilotData holding ``du`` closest to ``label`` (ties: smallest id)."""
        pool = du.replicas if pool is None else pool
        if not pool:
            raise StagingError(f"Data-Unit {du.id} has no reachable replica")
        return min((self.data_pilot(pd_id) for pd_id in pool),
                   key=lambda pd: (self.topology.distance(pd.label, label), pd.id))

    # -- unit records ------------------------------------------------------------

    def register_cu(self, cu, store=None):
        store = store or self.store
        with self.lock:
            store.put_state(key_for(cu.id), cu.to_record())
            self.cus[cu.id] = cu
            for du_id in cu.description.output_data:
                self.producers.setdefault(du_id, [])
                if cu.id not in self.producers[du_id]:
                    self.producers[du_id].append(cu.id)

    def update_cu(self, cu_id, fn, store=None):
        """Apply ``fn(ComputeUnit)`` atomically to the stored record."""
        store = store or self.store

        def apply(rec):
            cu = ComputeUnit.from_record(rec)
            fn(cu)
            return cu.to_record()

        with self.lock:
            rec = store.update(key_for(cu_id), apply)
            cu = ComputeUnit.from_record(rec)
            self.cus[cu_id] = cu
            if cu.terminal:
                self._terminal.notify_all()
            return cu

    def transition_cu(self, cu_id, to, store=None, actor="agent", **changes):
        """Transition a CU, apply attribute ``changes`` and log the event."""
        pilot = changes.pop("pilot", None)
        now = self.now()

        def apply(cu):
            transition(cu, to, now, pilot=pilot)
            for name, value in changes.items():
                setattr(cu, name, value)

        cu = self.update_cu(cu_id, apply, store)
        details = {"pilot": cu.assigned_pilot} if cu.assigned_pilot else {}
        if cu.reason and to in (CUState.FAILED, CUState.CANCELED):
            details["reason"] = cu.reason
        self.events.record(actor, f"cu.{CUState(to).value.lower()}", cu_id, **details)
        return cu

    def register_du(self, du, store=None):
        store = store or self.store
        with self.lock:
            self.dus[du.id] = du
            store.put_state(key_for(du.id), du.to_record())

    def save_du(self, du, store=None):
        self.register_du(du, store)

    # -- queues ------------------------------------------------------------------

    def enqueue(self, queue, cu_id, store=None):
        (store or self.store).enqueue(queue, cu_id)
        self.wake(queue)

    def wake(self, queue):
        """Let simulated agents notice new work (threaded agents block in pull)."""
        if not self.simulated:
            return
        if queue == GLOBAL:
            agents = [self.agents[p] for p in sorted(self.agents)]
        else:
            agents = [self.agents[queue]] if queue in self.agents else []
        for agent in agents:
            agent.wake()

    def queued_cores(self, pilot_id, store=None):
        store = store or self.store
        if not store.has_queue(pilot_id):
            return 0
        return sum(self.cu(c).description.cores for c in store.queue_items(pilot_id))

    def available_slots(self, pilot, store=None):
        """Free slots not yet promised to CUs waiting in the pilot's queue."""
        if pilot.state is not PCState.ACTIVE:
            return 0
        return pilot.free_slots - self.queued_cores(pilot.id, store)

    def busy_cores(self):
        """Cores held by CUs in STAGING_IN, RUNNING or STAGING_OUT."""
        return sum(cu.description.cores for cu in self.cus.values() if cu.state in ACTIVE_STATES)

    # -- data-unit lifecycle -------------------------------------------------------

    def producers_done(self, cu_id, store=None):
        """Settle the output DUs of a CU that just reached a terminal state."""
        for du_id in self.cu(cu_id).description.output_data:
            self.producer_finished(du_id, store)

    def producer_finished(self, du_id, store=None):
        """Seal or fail an output DU once every producing CU is terminal."""
        du = self.du(du_id)
        if du.state is not DUState.PENDING:
            return
        states = [self.cu(c).state for c in self.producers.get(du_id, [])]
        if any(s in (CUState.FAILED, CUState.CANCELED) for s in states):
            du.state = DUState.FAILED
            self.save_du(du, store)
            self.events.record("agent", "du.failed", du_id)
            self.notify_du(du_id)
        elif all(s is CUState.DONE for s in states):
            pd = self.data_pilot(du.home)
            contents = pd.adaptor.replica_contents(pd, du)
            with self.lock:
                seal(du, replica_contents={pd.id: contents})
                du.add_replica(pd.id)
                pd.held_dus.add(du.id)
                pd.bytes_used += du.size
                self.save_du(du, store)
            self.events.record("agent", "du.available", du_id, files=len(du.manifest))
            self.notify_du(du_id)

    def notify_du(self, du_id):
        if self.manager is not None:
            self.clock.call_soon(self.manager.on_du_changed, du_id)

    # -- running -------------------------------------------------------------------

    def all_terminal(self):
        return all(cu.terminal for cu in self.cus.values())

    def settled(self):
        """Every CU is terminal and no agent is still finishing one up."""
        return self.all_terminal() and not any(a.busy for a in list(self.agents.values()))

    def run(self, until=None, timeout=None):
        """Drive the workload.

        Simulated sessions run the event loop until it drains (or ``until``);
        real sessions block until every CU is terminal or ``timeout`` expires.
        """
        if self.simulated:
            return self.clock.run(until=until)
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._terminal:
            while not self.settled():
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    break
                self._terminal.wait(0.05 if remaining is None else min(remaining, 0.05))
        return self.clock.now()

    def close(self):
        for agent in list(self.agents.values()):
            agent.stop()
        if not self.simulated:
            self.clock.stop()
        if self.manager is not None:
            self.manager.close()
