"""Factory services that create Pilot-Computes and Pilot-Data and move Data-Units."""

import enum
import logging
import time
from concurrent.futures import ThreadPoolExecutor

from ..coordination import GLOBAL, key_for
from ..errors import CapacityError, NotFoundError, PilotDataError, StagingError, ValidationError
from ..units import DataUnit, DataUnitDescription, DUState, FileEntry, seal, validate_description
from .base import (
    PCState,
    PDState,
    PilotCompute,
    PilotComputeDescription,
    PilotData,
    PilotDataDescription,
    QueueModel,
    ReplicationReport,
    StagingMode,
    TransferRecord,
    split_service_url,
)

logger = logging.getLogger(__name__)


class ReplicationMode(str, enum.Enum):
    SEQUENTIAL = "SEQUENTIAL"
    GROUP = "GROUP"

    def __str__(self):
        return self.value


def _coerce(desc, cls):
    if isinstance(desc, cls):
        return desc
    if isinstance(desc, dict):
        return cls.from_dict(desc)
    raise ValidationError(f"expected {cls.__name__} or dict, got {type(desc).__name__}")


class PilotComputeService:
    """Creates Pilot-Computes and runs their lifecycle on the session clock."""

    def __init__(self, session):
        self.session = session

    def create_pilot(self, description):
        from ..agent import PilotAgent

        s = self.session
        desc = _coerce(description, PilotComputeDescription)
        problems = desc.validate()
        if problems:
            raise ValidationError(problems)
        scheme, address = split_service_url(desc.service_url)
        adaptor = s.adaptor(scheme)
        label = adaptor.resolve_pilot_label(address, desc.affinity)
        if not adaptor.simulated:
            s.ensure_label(label)
        pilot = PilotCompute(
            id=s.store.next_id("pc"),
            description=desc,
            label=label,
            adaptor=adaptor,
            submit_time=s.now(),
            staging_mode=StagingMode(str(desc.staging_mode).upper()),
        )
        adaptor.init_sandbox(pilot)
        s.store.register_pilot(pilot.id)
        with s.lock:
            s.pilots[pilot.id] = pilot
            s.agents[pilot.id] = PilotAgent(s, pilot)
        pilot.state = PCState.QUEUED_AT_RESOURCE
        self._save(pilot)
        s.events.record("pilot", "pilot.queued", pilot.id, label=str(label))
        delay = QueueModel.parse(desc.queue_model).sample(s.rng)
        if delay == 0:
            self._activate(pilot)
        else:
            s.clock.call_later(delay, self._activate, pilot)
        return pilot

    def _save(self, pilot):
        self.session.store.put_state(key_for(pilot.id), pilot.to_record())

    def _activate(self, pilot):
        s = self.session
        if pilot.state is not PCState.QUEUED_AT_RESOURCE:
            return
        with s.lock:
            pilot.state = PCState.ACTIVE
            pilot.activation_time = s.now()
            pilot.free_slots = pilot.process_count
        self._save(pilot)
        s.events.record("pilot", "pilot.active", pilot.id, slots=pilot.process_count)
        walltime = pilot.description.walltime
        if walltime is not None:
            s.agents[pilot.id].deadline = s.now() + walltime
            s.clock.call_later(walltime, self._finish, pilot, PCState.DONE, "WALLTIME")
        s.agents[pilot.id].start()
        if s.manager is not None:
            s.clock.call_soon(s.manager.on_pilot_active, pilot.id)

    def _finish(self, pilot, state, reason):
        s = self.session
        if pilot.state in (PCState.DONE, PCState.FAILED, PCState.CANCELED):
            return
        pilot.state = state
        s.agents[pilot.id].stop(reason)
        leftovers = s.store.drop_queue(pilot.id)
        for cu_id in leftovers:
            s.enqueue(GLOBAL, cu_id)
        self._save(pilot)
        s.events.record("pilot", f"pilot.{state.value.lower()}", pilot.id,
                        requeued=len(leftovers))

    def cancel_pilot(self, pilot_id):
        pilot = self.session.pilot(pilot_id)
        self._finish(pilot, PCState.CANCELED, "CANCELED")
        return pilot

    def list_pilots(self):
        return [self.session.pilots[p] for p in sorted(self.session.pilots)]


class PilotDataService:
    """Creates Pilot-Data and places, replicates and retrieves Data-Units."""

    def __init__(self, session):
        self.session = session

    def create_pilot_data(self, description):
        s = self.session
        desc = _coerce(description, PilotDataDescription)
        problems = desc.validate()
        if problems:
            raise ValidationError(problems)
        scheme, address = split_service_url(desc.service_url)
        adaptor = s.adaptor(scheme)
        label = adaptor.resolve_pilot_label(address, desc.affinity)
        if not adaptor.simulated:
            s.ensure_label(label)
        pd = PilotData(id=s.store.next_id("pd"), description=desc, label=label, adaptor=adaptor)
        adaptor.init_pilot_data(pd)
        pd.state = PDState.ACTIVE
        with s.lock:
            s.pilot_data[pd.id] = pd
        self._save(pd)
        s.events.record("pilot-data", "pd.active", pd.id, label=str(label))
        return pd

    def _save(self, pd):
        self.session.store.put_state(key_for(pd.id), pd.to_record())

    @staticmethod
    def _check_capacity(pd, extra):
        if pd.capacity is not None and pd.bytes_used + extra > pd.capacity:
            raise CapacityError(
                f"{pd.id} holds {pd.bytes_used} of {pd.capacity} bytes; cannot add {extra}")

    def _resolve(self, pd):
        pd = self.session.data_pilot(pd) if isinstance(pd, str) else pd
        if pd.state is not PDState.ACTIVE:
            raise StagingError(f"{pd.id} is not ACTIVE ({pd.state})")
        return pd

    def put_du(self, pd, description):
        """Create a Data-Unit on ``pd`` from its file references.

        With no references the unit is an empty output container left
        PENDING. Otherwise the files are ingested and the unit is sealed;
        ``staging_seconds`` is the transfer time plus registration time.
        """
        s = self.session
        pd = self._resolve(pd)
        desc = _coerce(description, DataUnitDescription)
        problems = validate_description(desc)
        if problems:
            raise ValidationError(problems)
        du = DataUnit(id=s.store.next_id("du"), description=desc, home=pd.id)
        du.state = DUState.PENDING
        if desc.file_refs:
            sources = pd.adaptor.resolve_sources(desc.file_refs)
            total = sum(src[1] for src in sources)
            self._check_capacity(pd, total)
            transfer = pd.adaptor.ingest(pd, du, sources)
            for relpath, size, digest, _, _ in sources:
                du.add_file(relpath, FileEntry(size, digest))
            seal(du, replica_contents={pd.id: pd.adaptor.replica_contents(pd, du)})
            du.add_replica(pd.id)
            du.staging_seconds = transfer + s.t_register * len(sources)
            with s.lock:
                pd.held_dus.add(du.id)
                pd.bytes_used += total
            self._save(pd)
        s.register_du(du)
        s.events.record("pilot-data", "du.put", du.id, pd=pd.id, state=du.state.value,
                        staging_s=du.staging_seconds)
        return du

    def replicate(self, du, targets, mode=ReplicationMode.SEQUENTIAL, timed=False):
        """Copy ``du`` onto every target Pilot-Data.

        Each transfer reads from the replica nearest its target. In
        SEQUENTIAL mode replicas made earlier in the same call are eligible
        sources and the total time is the sum of transfer times; in GROUP
        mode all transfers start together from the initial replicas and the
        total is the longest transfer. Failed targets are recorded in the
        report and do not abort the others.

        With ``timed`` (simulated sessions only) the new replicas become
        visible on the clock when their transfer completes instead of
        immediately.
        """
        s = self.session
        du = s.du(du) if isinstance(du, str) else du
        mode = ReplicationMode(str(mode).upper())
        if du.state is not DUState.AVAILABLE:
            raise StagingError(f"cannot replicate {du.id} in state {du.state}")
        targets = [s.data_pilot(t) if isinstance(t, str) else t for t in targets]
        report = ReplicationReport(du.id, mode.value)
        initial = list(du.replicas)
        pool = list(initial)
        work = []
        for target in targets:
            if target.id in du.replicas or target.id in pool:
                report.transfers.append(TransferRecord(target.id, skipped=True))
                continue
            if target.state is not PDState.ACTIVE:
                report.transfers.append(TransferRecord(target.id, ok=False,
                                                       error=f"{target.id} is not ACTIVE"))
                continue
            source = s.nearest_replica(du, target.label, initial if mode is ReplicationMode.GROUP else pool)
            record = TransferRecord(target.id, source=source.id)
            report.transfers.append(record)
            if mode is ReplicationMode.SEQUENTIAL:
                self._transfer(du, source, target, record)
                if record.ok:
                    pool.append(target.id)
            else:
                work.append((source, target, record))

        if mode is ReplicationMode.GROUP and work:
            if s.simulated or len(work) == 1:
                for source, target, record in work:
                    self._transfer(du, source, target, record)
                report.total_seconds = max(r.seconds for _, _, r in work)
            else:
                start = time.perf_counter()
                with ThreadPoolExecutor(max_workers=s.group_workers) as pool_exec:
                    list(pool_exec.map(lambda w: self._transfer(du, *w), work))
                report.total_seconds = time.perf_counter() - start
        elif mode is ReplicationMode.SEQUENTIAL:
            report.total_seconds = sum(r.seconds for r in report.transfers)

        self._register_replicas(du, report, mode, timed)
        s.events.record("pilot-data", "du.replicate", du.id, mode=mode.value,
                        total_s=report.total_seconds, ok=len(report.succeeded))
        return report

    def _transfer(self, du, source, target, record):
        try:
            self._check_capacity(target, du.size)
            record.seconds = target.adaptor.copy_du(du, source, target)
            contents = target.adaptor.replica_contents(target, du)
            if contents != du.manifest:
                target.adaptor.delete_replica(target, du)
                raise StagingError(f"replica of {du.id} on {target.id} does not match its manifest")
        except PilotDataError as exc:
            record.ok = False
            record.seconds = 0.0
            record.error = str(exc)
            logger.warning("replication of %s to %s failed: %s", du.id, target.id, exc)

    def _register_replicas(self, du, report, mode, timed):
        s = self.session
        elapsed = 0.0
        for record in report.transfers:
            if record.skipped or not record.ok:
                continue
            elapsed = elapsed + record.seconds if mode is ReplicationMode.SEQUENTIAL else record.seconds
            target = s.data_pilot(record.target)
            with s.lock:
                target.held_dus.add(du.id)
                target.bytes_used += du.size
            self._save(target)
            if timed and s.simulated and elapsed > 0:
                s.clock.call_later(elapsed, self._add_replica, du, target.id)
            else:
                self._add_replica(du, target.id)

    def _add_replica(self, du, pd_id):
        s = self.session
        with s.lock:
            du.add_replica(pd_id)
            s.save_du(du)
        s.events.record("pilot-data", "du.replica", du.id, pd=pd_id)
        s.notify_du(du.id)

    def _replica_pd(self, du, pd=None):
        s = self.session
        du = s.du(du) if isinstance(du, str) else du
        if du.state is not DUState.AVAILABLE:
            raise StagingError(f"{du.id} is not AVAILABLE ({du.state})")
        if pd is None:
            pd = du.replicas[0]
        pd = s.data_pilot(pd) if isinstance(pd, str) else pd
        if pd.id not in du.replicas:
            raise NotFoundError(f"{pd.id} holds no replica of {du.id}")
        return du, pd

    def export_du(self, du, destination, pd=None):
        du, pd = self._replica_pd(du, pd)
        return pd.adaptor.export_du(pd, du, destination)

    def get_file(self, du, relpath, pd=None):
        du, pd = self._replica_pd(du, pd)
        if relpath not in du.manifest:
            raise NotFoundError(f"{du.id} has no file {relpath!r}")
        return pd.adaptor.read_file(pd, du, relpath)

    def remove_replica(self, du, pd):
        """Delete one replica; the last replica of a sealed unit is kept."""
        s = self.session
        du = s.du(du) if isinstance(du, str) else du
        pd = s.data_pilot(pd) if isinstance(pd, str) else pd
        if pd.id not in du.replicas:
            raise NotFoundError(f"{pd.id} holds no replica of {du.id}")
        if du.state is DUState.AVAILABLE and len(du.replicas) == 1:
            raise ValidationError(f"refusing to delete the last replica of {du.id}")
        pd.adaptor.delete_replica(pd, du)
        with s.lock:
            du.replicas.remove(pd.id)
            pd.held_dus.discard(du.id)
            pd.bytes_used -= du.size
            s.save_du(du)
        self._save(pd)
