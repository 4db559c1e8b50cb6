"""Exception hierarchy shared by every pilotdata component."""


class PilotDataError(Exception):
    """Base class for all errors raised by pilotdata."""


class ValidationError(PilotDataError, ValueError):
    """A description or label failed validation.

    ``violations`` holds every problem found, not just the first one.
    """

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class NotFoundError(PilotDataError, LookupError):
    """Unknown label, key, unit, pilot or file."""

    def __str__(self):
        # LookupError subclasses would otherwise repr() the message
        return str(self.args[0]) if self.args else ""


class ConflictError(PilotDataError):
    """Duplicate enqueue or other conflicting update."""


class StateError(PilotDataError):
    """An illegal state-machine edge was requested."""

    def __init__(self, kind, current, requested):
        self.current = current
        self.requested = requested
        super().__init__(f"illegal {kind} transition {current} -> {requested}")


class ImmutabilityError(PilotDataError):
    """Attempt to modify a sealed Data-Unit."""


class IntegrityError(PilotDataError):
    """Content digest mismatch or corrupt snapshot.

    ``offset`` is the byte offset of the damaged record for snapshot errors.
    """

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class StagingError(PilotDataError):
    """A file could not be moved into or out of a sandbox or Pilot-Data."""


class CapacityError(StagingError):
    """A Pilot-Data would exceed its configured capacity."""


class AdaptorError(PilotDataError):
    """No backend adaptor is registered for a service URL scheme."""


class StorageError(PilotDataError):
    """A storage location could not be created or written."""


class ModelError(PilotDataError):
    """The cost model lacks an input it needs (e.g. a bandwidth entry)."""
