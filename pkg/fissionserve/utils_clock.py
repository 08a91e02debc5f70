import enum
import time
import heapq
import logging
import itertools
import threading

import numpy as np

logger = logging.getLogger("FissionServe")


class ClockMode(str, enum.Enum):
    VIRTUAL = "Virtual"
    REALTIME = "RealTime"


class Event:
    __slots__ = ("time", "seq", "fn", "args", "cancelled")

    def __init__(self, at, seq, fn, args):
        self.time = at
        self.seq = seq
        self.fn = fn
        self.args = args
        self.cancelled = False

    def __repr__(self):
        name = getattr(self.fn, "__qualname__", repr(self.fn))
        return f"Event(t={self.time:.3f}, seq={self.seq}, {name})"


class SimClock:
    def __init__(self, mode=ClockMode.VIRTUAL, clock_speed=1.0, jitter_ms=0.0, seed=0):
        self.mode = ClockMode(mode)
        if clock_speed <= 0:
            raise ValueError("clock_speed must be positive")
        self.clock_speed = clock_speed
        self.jitter_ms = jitter_ms
        self._rng = np.random.default_rng(seed)
        self._now = 0.0
        self._queue = []
        self._counter = itertools.count()
        self._cond = threading.Condition(threading.RLock())
        self._origin = None
        self._thread = None
        self._stopping = False
        self.processed = 0

    @property
    def now(self):
        return self._now

    @property
    def driven(self):
        """True while a driver thread owns event processing."""
        return self._thread is not None

    def wall_now(self):
        """Virtual time the wall clock has reached (RealTime only)."""
        if self._origin is None:
            return self._now
        return (time.monotonic() - self._origin) * 1000.0 * self.clock_speed

    def call_at(self, at, fn, *args):
        with self._cond:
            if at < self._now:
                raise ValueError(f"cannot schedule at {at:.3f} ms, clock is at {self._now:.3f} ms")
            event = Event(at, next(self._counter), fn, args)
            heapq.heappush(self._queue, (at, event.seq, event))
            self._cond.notify_all()
            return event

    def call_later(self, delay, fn, *args):
        if delay < 0:
            raise ValueError("delay must be >= 0")
        with self._cond:
            return self.call_at(self._now + delay, fn, *args)

    def post(self, fn, *args):
        """Schedule ``fn`` as soon as possible; safe from any thread."""
        with self._cond:
            at = self._now
            if self.mode is ClockMode.REALTIME and self._origin is not None:
                at = max(at, self.wall_now())
            return self.call_at(at, fn, *args)

    def cancel(self, event):
        with self._cond:
            event.cancelled = True

    def pending(self):
        with self._cond:
            return sum(1 for _, _, event in self._queue if not event.cancelled)

    def next_time(self):
        with self._cond:
            self._drop_cancelled()
            return self._queue[0][0] if self._queue else None

    def _drop_cancelled(self):
        while self._queue and self._queue[0][2].cancelled:
            heapq.heappop(self._queue)

    def _wait_for_deadline(self, at):
        """Sleep until the wall deadline of ``at``; False if woken early."""
        if self._origin is None:
            self._origin = time.monotonic() - self._now / 1000.0 / self.clock_speed
        deadline = self._origin + at / 1000.0 / self.clock_speed
        if self.jitter_ms > 0:
            deadline += abs(self._rng.normal(0.0, self.jitter_ms)) / 1000.0
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            return True
        self._cond.wait(timeout=remaining)
        return False

    def step(self):
        """Process the earliest event. Returns False when there is none."""
        with self._cond:
            while True:
                self._drop_cancelled()
                if not self._queue:
                    return False
                at, _, event = self._queue[0]
                if self.mode is ClockMode.REALTIME and not self._wait_for_deadline(at):
                    # a new, possibly earlier, event may have arrived
                    continue
                heapq.heappop(self._queue)
                self._now = max(self._now, at)
                break
        self.processed += 1
        event.fn(*event.args)
        return True

    def run(self, until=None):
        """Process events up to ``until`` (or until the queue is empty)."""
        count = 0
        while True:
            upcoming = self.next_time()
            if upcoming is None or (until is not None and upcoming > until):
                break
            if self.step():
                count += 1
        if until is not None and until > self._now:
            with self._cond:
                self._now = until
        return count

    # ---------------------------------------------------------------------
    # Driver thread for live servers
    # ---------------------------------------------------------------------

    def _serve_forever(self):
        while True:
            with self._cond:
                self._drop_cancelled()
                while not self._queue and not self._stopping:
                    self._cond.wait(timeout=0.5)
                if self._stopping:
                    return
            try:
                self.step()
            except Exception:
                logger.exception("Clock event failed")

    def anchor(self, origin=None):
        """Pin the monotonic wall time that virtual time 0 maps to."""
        with self._cond:
            if origin is not None:
                self._origin = origin
            elif self._origin is None:
                self._origin = time.monotonic() - self._now / 1000.0 / self.clock_speed
            return self._origin

    def start(self):
        if self._thread is not None:
            return self
        if self.mode is ClockMode.REALTIME:
            self.anchor()
        self._stopping = False
        self._thread = threading.Thread(target=self._serve_forever, name="sim-clock", daemon=True)
        self._thread.start()
        logger.debug("Clock driver started in %s mode", self.mode.value)
        return self

    def stop(self, timeout=5.0):
        if self._thread is None:
            return
        with self._cond:
            self._stopping = True
            self._cond.notify_all()
        self._thread.join(timeout)
        self._thread = None
