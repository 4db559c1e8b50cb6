"""Clocks and the event log shared by all runtime components.

:class:`SimClock` is a discrete-event loop ordered by ``(time, sequence)``,
so two runs of the same workload fire callbacks in the same order.
:class:`RealClock` offers the same ``call_later`` interface backed by a
timer thread, for runs against the local filesystem backend.
"""

import heapq
import itertools
import logging
import threading
import time

logger = logging.getLogger(__name__)


class Timer:
    __slots__ = ("when", "callback", "args", "cancelled")

    def __init__(self, when, callback, args):
        self.when = when
        self.callback = callback
        self.args = args
        self.cancelled = False

    def cancel(self):
        self.cancelled = True


class SimClock:
    simulated = True

    def __init__(self, start=0.0):
        self._now = float(start)
        self._heap = []
        self._seq = itertools.count()
        self.after_event = []
        self.events_fired = 0

    def now(self):
        return self._now

    def call_at(self, when, callback, *args):
        if when < self._now:
            raise ValueError(f"cannot schedule in the past ({when} < {self._now})")
        timer = Timer(when, callback, args)
        heapq.heappush(self._heap, (when, next(self._seq), timer))
        return timer

    def call_later(self, delay, callback, *args):
        if delay < 0:
            raise ValueError(f"negative delay {delay}")
        return self.call_at(self._now + delay, callback, *args)

    def call_soon(self, callback, *args):
        return self.call_at(self._now, callback, *args)

    def pending(self):
        return sum(1 for _, _, t in self._heap if not t.cancelled)

    def step(self):
        """Fire the next live callback; False when nothing is left."""
        while self._heap:
            when, _, timer = heapq.heappop(self._heap)
            if timer.cancelled:
                continue
            self._now = when
            timer.callback(*timer.args)
            self.events_fired += 1
            for hook in self.after_event:
                hook()
            return True
        return False

    def run(self, until=None, max_events=None):
        """Run callbacks until the queue drains, ``until`` is reached or
        ``max_events`` have fired. Returns the final clock value."""
        fired = 0
        while self._heap:
            if until is not None and self._heap[0][0] > until:
                self._now = max(self._now, until)
                break
            if max_events is not None and fired >= max_events:
                break
            if self.step():
                fired += 1
        return self._now


class RealClock:
    """Wall-clock seconds since construction, with a callback thread."""

    simulated = False

    def __init__(self):
        self._t0 = time.monotonic()
        self._heap = []
        self._seq = itertools.count()
        self._cond = threading.Condition()
        self._stopped = False
        self._busy = 0
        self._thread = threading.Thread(target=self._loop, name="realclock", daemon=True)
        self._thread.start()
        self.errors = []

    def now(self):
        return time.monotonic() - self._t0

    def call_at(self, when, callback, *args):
        timer = Timer(when, callback, args)
        with self._cond:
            heapq.heappush(self._heap, (when, next(self._seq), timer))
            self._cond.notify_all()
        return timer

    def call_later(self, delay, callback, *args):
        return self.call_at(self.now() + max(delay, 0.0), callback, *args)

    def call_soon(self, callback, *args):
        return self.call_at(self.now(), callback, *args)

    def pending(self):
        with self._cond:
            return self._busy + sum(1 for _, _, t in self._heap if not t.cancelled)

    def _loop(self):
        while True:
            with self._cond:
                while not self._stopped:
                    if self._heap:
                        wait = self._heap[0][0] - self.now()
                        if wait <= 0:
                            break
                        self._cond.wait(wait)
                    else:
                        self._cond.wait()
                if self._stopped:
                    return
                _, _, timer = heapq.heappop(self._heap)
                if timer.cancelled:
                    continue
                self._busy += 1
            try:
                timer.callback(*timer.args)
            except Exception as exc:  # keep the timer thread alive; surfaced via .errors
                logger.exception("callback %r failed", timer.callback)
                self.errors.append(exc)
            finally:
                with self._cond:
                    self._busy -= 1
                    self._cond.notify_all()

    def stop(self):
        with self._cond:
            self._stopped = True
            self._cond.notify_all()
        self._thread.join(timeout=5)


class EventLog:
    """Append-only list of runtime events.

    Each event is a dict with ``t``, ``seq``, ``actor``, ``kind`` and
    ``subject`` plus free-form details.
    """

    def __init__(self, clock):
        self.clock = clock
        self.events = []
        self._lock = threading.Lock()

    def record(self, actor, kind, subject, **details):
        with self._lock:
            event = {"t": self.clock.now(), "seq": len(self.events), "actor": actor,
                     "kind": kind, "subject": subject}
            event.update(details)
            self.events.append(event)
            return event

    def of_kind(self, kind):
        return [e for e in self.events if e["kind"] == kind]

    def __len__(self):
        return len(self.events)

    def __iter__(self):
        return iter(list(self.events))
