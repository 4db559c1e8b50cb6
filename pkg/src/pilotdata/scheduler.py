"""Compute-Data Service: accepts CU and DU submissions and routes CUs to queues.

Affinity-aware placement runs in four steps:

1. rank the pilots: the requested affinity filters them, then the
   size-weighted tree distance to the nearest replica of every input DU
   orders them, then more available slots, then the pilot id;
2. if the best pilot is ACTIVE and has room, enqueue on its own queue;
3. with delayed scheduling on, wait ``delay_seconds`` and look at that pilot
   once more;
4. otherwise enqueue on the global queue, which every agent pulls from.
"""

import enum
import json
import logging
import random
import warnings
from dataclasses import asdict, dataclass, field

from .coordination import GLOBAL, SUBMISSIONS, key_for
from .errors import NotFoundError, ValidationError
from .pilots.base import PCState
from .units import (
    ComputeUnit,
    ComputeUnitDescription,
    CUState,
    DataUnitDescription,
    DUState,
    validate_description,
)

logger = logging.getLogger(__name__)


class Policy(str, enum.Enum):
    AFFINITY_AWARE = "AFFINITY_AWARE"
    AFFINITY_BLIND_ROUNDROBIN = "AFFINITY_BLIND_ROUNDROBIN"
    RANDOM = "RANDOM"

    def __str__(self):
        return self.value


class Reason(str, enum.Enum):
    AFFINITY_MATCH = "AFFINITY_MATCH"
    INPUT_DATA_LOCALITY = "INPUT_DATA_LOCALITY"
    DELAYED_RETRY_EXPIRED = "DELAYED_RETRY_EXPIRED"
    NO_MATCH = "NO_MATCH"

    def __str__(self):
        return self.value


@dataclass
class SchedulerConfig:
    policy: Policy = Policy.AFFINITY_AWARE
    delayed_scheduling: bool = False
    delay_seconds: float = 5.0
    seed: int = 0

    def __post_init__(self):
        try:
            self.policy = Policy(str(self.policy).upper())
        except ValueError:
            raise ValidationError(f"unknown scheduling policy {self.policy!r}") from None
        if not self.delay_seconds >= 0:
            raise ValidationError(f"delay_seconds must be ≥ 0, got {self.delay_seconds!r}")

    @classmethod
    def from_dict(cls, data):
        data = dict(data or {})
        if "delayed_scheduling_enabled" in data:
            data["delayed_scheduling"] = data.pop("delayed_scheduling_enabled")
        known = {"policy", "delayed_scheduling", "delay_seconds", "seed"}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValidationError([f"unknown scheduler field {k!r}" for k in unknown])
        return cls(**data)

    def to_dict(self):
        return {"policy": self.policy.value, "delayed_scheduling": self.delayed_scheduling,
                "delay_seconds": self.delay_seconds, "seed": self.seed}


@dataclass
class PlacementDecision:
    cu_id: str
    target: str
    reason: Reason
    t: float = 0.0
    rank: list = field(default_factory=list)

    def to_json(self):
        out = asdict(self)
        out["reason"] = self.reason.value
        return out


class ComputeUnitHandle:
    """What :meth:`ComputeDataService.submit` returns."""

    def __init__(self, service, cu_id):
        self._service = service
        self.id = cu_id

    @property
    def unit(self):
        return self._service.session.cu(self.id)

    @property
    def state(self):
        return self.unit.state

    def cancel(self):
        return self._service.cancel(self.id)

    def __repr__(self):
        return f"<ComputeUnit {self.id} {self.state}>"


class ComputeDataService:
    """The manager: validates submissions, places CUs and handles cancellation.

    ``store`` defaults to the session's store; the crash-recovery tests hand
    in a proxy so that only manager-side operations can be interrupted.
    """

    def __init__(self, session, config=None, *, store=None, audit_path=None,
                 pilot_data_service=None):
        from .pilots.services import PilotDataService

        self.session = session
        self.config = config if isinstance(config, SchedulerConfig) else SchedulerConfig.from_dict(config)
        self._store = store
        self.rng = random.Random(self.config.seed)
        self.decisions = []
        self.waiting = {}
        self._rr = 0
        self._audit = open(audit_path, "a", encoding="utf-8") if audit_path else None
        self.data = pilot_data_service or PilotDataService(session)
        session.manager = self

    @property
    def store(self):
        return self._store if self._store is not None else self.session.store

    # -- submission --------------------------------------------------------------

    def submit(self, description):
        """Validate and register a CU; placement happens asynchronously."""
        s = self.session
        desc = description if isinstance(description, ComputeUnitDescription) \
            else ComputeUnitDescription.from_dict(description)
        problems = validate_description(desc, known_dus=s.dus)
        if problems:
            raise ValidationError(problems)
        cu = ComputeUnit(self.store.next_id("cu"), desc)
        cu.timestamps[CUState.NEW.value] = s.now()
        s.register_cu(cu, self.store)
        s.events.record("manager", "cu.new", cu.id)
        s.clock.call_soon(self._dispatch, cu.id)
        return ComputeUnitHandle(self, cu.id)

    def adopt_submissions(self, queue=SUBMISSIONS):
        """Dispatch CUs that another process recorded in the store.

        ``pilotdata submit`` writes a NEW record and queues its id on
        ``queue``. Each one is taken off that queue and handled like a local
        submission. A CU naming a Data-Unit this session does not hold fails
        with reason UNKNOWN_DATA. Returns the adopted ids.
        """
        s, store = self.session, self.store
        if not store.has_queue(queue):
            return []
        adopted = []
        for cu_id in store.queue_items(queue):
            store.remove(cu_id)
            cu = ComputeUnit.from_record(store.get_state(key_for(cu_id)))
            if cu.state is not CUState.NEW:
                continue
            cu.timestamps.setdefault(CUState.NEW.value, s.now())
            s.register_cu(cu, store)
            s.events.record("manager", "cu.new", cu_id, via=queue)
            adopted.append(cu_id)
            desc = cu.description
            if any(d not in s.dus for d in (*desc.input_data, *desc.output_data)):
                s.transition_cu(cu_id, CUState.FAILED, store, actor="manager", reason="UNKNOWN_DATA")
                for du_id in desc.output_data:
                    if du_id in s.dus:
                        s.producer_finished(du_id, store)
                continue
            s.clock.call_soon(self._dispatch, cu_id)
        return adopted

    def submit_du(self, description, pilot_data=None):
        """Create a Data-Unit on ``pilot_data`` or, by default, on the
        Pilot-Data nearest the description's affinity."""
        s = self.session
        desc = description if isinstance(description, DataUnitDescription) \
            else DataUnitDescription.from_dict(description)
        if pilot_data is None:
            if not s.pilot_data:
                raise NotFoundError("no Pilot-Data to hold the Data-Unit")
            pds = [s.pilot_data[p] for p in sorted(s.pilot_data)]
            if desc.affinity is None:
                pilot_data = pds[0]
            else:
                s.ensure_label(desc.affinity)
                pilot_data = min(pds, key=lambda pd: (s.topology.distance(pd.label, desc.affinity), pd.id))
        return self.data.put_du(pilot_data, desc)

    # -- dispatch ----------------------------------------------------------------

    def _current(self):
        return self.session.manager is self

    def _dispatch(self, cu_id):
        if not self._current():
            return
        s = self.session
        cu = s.cu(cu_id)
        if cu.state is not CUState.NEW:
            return
        states = [s.du(d).state for d in cu.description.input_data]
        if any(st in (DUState.FAILED, DUState.DELETED) for st in states):
            s.transition_cu(cu_id, CUState.FAILED, self.store, actor="manager", reason="INPUT_FAILED")
            s.producers_done(cu_id, self.store)
            return
        if any(st is not DUState.AVAILABLE for st in states):
            for du_id in cu.description.input_data:
                self.waiting.setdefault(du_id, set()).add(cu_id)
            return
        s.transition_cu(cu_id, CUState.QUEUED, self.store, actor="manager")
        self.place(cu_id)

    def on_du_changed(self, du_id):
        if not self._current():
            return
        for cu_id in sorted(self.waiting.pop(du_id, ())):
            self._dispatch(cu_id)

    def on_pilot_active(self, pilot_id):
        """Hook for pilot activation; placement re-checks happen on their own timers."""

    # -- placement ---------------------------------------------------------------

    def _candidates(self, cu, include_inactive):
        s = self.session
        allowed = (PCState.ACTIVE, PCState.QUEUED_AT_RESOURCE) if include_inactive else (PCState.ACTIVE,)
        pilots = [s.pilots[p] for p in sorted(s.pilots) if s.pilots[p].state in allowed]
        if cu.description.affinity is not None:
            pilots = [p for p in pilots if p.label.is_within(cu.description.affinity)]
        return pilots

    def data_distance(self, cu, pilot):
        """Size-weighted sum of tree distances from ``pilot`` to each input's nearest replica."""
        s = self.session
        total = 0
        for du_id in cu.description.input_data:
            du = s.du(du_id)
            source = s.nearest_replica(du, pilot.label)
            total += du.size * s.topology.distance(source.label, pilot.label)
        return total

    def rank(self, cu, pilots):
        s = self.session
        keyed = [((self.data_distance(cu, p), -s.available_slots(p, self.store), p.id), p) for p in pilots]
        keyed.sort(key=lambda kp: kp[0])
        return keyed

    def place(self, cu_id):
        """Route a QUEUED CU; returns the decision, or ``None`` while a delayed re-check is pending."""
        if not self._current():
            return None
        cu = self.session.cu(cu_id)
        if cu.state is not CUState.QUEUED:
            return None
        policy = self.config.policy
        if policy is Policy.AFFINITY_AWARE:
            return self._place_affinity(cu)
        pilots = self._candidates(cu, include_inactive=False)
        if not pilots:
            return self._decide(cu, GLOBAL, Reason.NO_MATCH)
        if policy is Policy.RANDOM:
            pilot = self.rng.choice(pilots)
        else:
            pilot = pilots[self._rr % len(pilots)]
            self._rr += 1
        return self._decide(cu, pilot.id, Reason.NO_MATCH)

    def _place_affinity(self, cu):
        s = self.session
        desc = cu.description
        if desc.affinity is None and not desc.input_data:
            return self._decide(cu, GLOBAL, Reason.NO_MATCH)
        delayed = self.config.delayed_scheduling
        ranked = self.rank(cu, self._candidates(cu, include_inactive=delayed))
        if not ranked:
            return self._decide(cu, GLOBAL, Reason.NO_MATCH)
        rank_view = [[p.id, k[0], -k[1]] for k, p in ranked]
        best = ranked[0][1]
        if best.state is PCState.ACTIVE and s.available_slots(best, self.store) >= desc.cores:
            reason = Reason.INPUT_DATA_LOCALITY if desc.input_data else Reason.AFFINITY_MATCH
            return self._decide(cu, best.id, reason, rank_view)
        if delayed:
            s.events.record("manager", "cu.delay", cu.id, pilot=best.id, wait=self.config.delay_seconds)
            s.clock.call_later(self.config.delay_seconds, self._recheck, cu.id, best.id, rank_view)
            return None
        return self._decide(cu, GLOBAL, Reason.NO_MATCH, rank_view)

    def _recheck(self, cu_id, pilot_id, rank_view):
        if not self._current():
            return
        s = self.session
        cu = s.cu(cu_id)
        if cu.state is not CUState.QUEUED or self.store.queue_of(cu_id) or self.store.claimed_by(cu_id):
            return
        pilot = s.pilots[pilot_id]
        if pilot.state is PCState.ACTIVE and s.available_slots(pilot, self.store) >= cu.description.cores:
            self._decide(cu, pilot_id, Reason.AFFINITY_MATCH, rank_view)
        else:
            self._decide(cu, GLOBAL, Reason.DELAYED_RETRY_EXPIRED, rank_view)

    def _decide(self, cu, target, reason, rank_view=None):
        s = self.session
        decision = PlacementDecision(cu.id, target, reason, s.now(), rank_view or [])
        s.enqueue(target, cu.id, self.store)
        self.decisions.append(decision)
        s.events.record("manager", "cu.placed", cu.id, target=target, reason=reason.value)
        if self._audit is not None:
            self._audit.write(json.dumps(decision.to_json(), sort_keys=True) + "\n")
            self._audit.flush()
        return decision

    # -- cancellation ------------------------------------------------------------

    def cancel(self, cu_id):
        """Cancel a CU; terminal CUs are left alone with a warning. Returns True if canceled."""
        s = self.session
        cu = s.cu(cu_id)
        if cu.terminal:
            warnings.warn(f"{cu_id} is already {cu.state}; cancel ignored", RuntimeWarning, stacklevel=2)
            return False
        removed = self.store.remove(cu_id)
        unclaimed = cu.state in (CUState.NEW, CUState.QUEUED) and not self.store.claimed_by(cu_id)
        if removed or unclaimed:
            s.transition_cu(cu_id, CUState.CANCELED, self.store, actor="manager", reason="CANCELED")
            s.producers_done(cu_id, self.store)
            return True
        pilot_id = self.store.claimed_by(cu_id) or cu.assigned_pilot
        agent = s.agents.get(pilot_id)
        if agent is None or not agent.cancel(cu_id):
            s.transition_cu(cu_id, CUState.CANCELED, self.store, actor="manager", reason="CANCELED")
            s.producers_done(cu_id, self.store)
        return True

    # -- recovery ----------------------------------------------------------------

    @classmethod
    def recover(cls, session, config=None, **kwargs):
        """Build a fresh manager from the store's contents and re-drive unfinished CUs.

        NEW CUs are dispatched again (or adopted, when they still sit in the
        submissions queue); QUEUED CUs that sit in no queue and are
        not claimed by an agent (the manager died mid-placement) are placed
        again. Everything else is already in an agent's hands.
        """
        manager = cls(session, config, **kwargs)
        store = manager.store
        for key in store.keys("cu/"):
            if key.count("/") != 1:
                continue
            cu = ComputeUnit.from_record(store.get_state(key))
            session.cus[cu.id] = cu
            if cu.state is CUState.NEW and store.queue_of(cu.id) is None:
                session.clock.call_soon(manager._dispatch, cu.id)
            elif cu.state is CUState.QUEUED and not store.queue_of(cu.id) and not store.claimed_by(cu.id):
                session.clock.call_soon(manager.place, cu.id)
        manager.adopt_submissions()
        session.events.record("manager", "manager.recovered", store.name)
        return manager

    def close(self):
        if self._audit is not None:
            self._audit.close()
            self._audit = None
