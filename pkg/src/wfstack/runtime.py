"""Execution runtimes shared by executors, scheduler instances and the pilot.

Components never talk to each other directly; they post messages to
``Channel`` objects owned by the receiver. ``SimRuntime`` delivers messages
as events on a single-threaded discrete-event queue, ``RealRuntime`` gives
each channel its own thread and mailbox.
"""

from __future__ import annotations

import logging
import queue
import threading
import time
from collections.abc import Callable
from typing import Any

from .simcluster import EventQueue, SimClock

log = logging.getLogger(__name__)


class SimRuntime:
    simulated = True

    def __init__(self):
        self.clock = SimClock()
        self.events = EventQueue(self.clock)

    def now(self) -> int:
        return self.clock.now

    def call_at(self, tick: int, subject_id: str, fn: Callable[..., Any], *args):
        return self.events.push(tick, subject_id, fn, *args)

    def call_later(self, delay: int, subject_id: str, fn: Callable[..., Any], *args):
        return self.events.push(self.clock.now + int(delay), subject_id, fn, *args)

    def channel(self, name: str, handler: Callable[[Any], None]) -> SimChannel:
        return SimChannel(self, name, handler)

    def notify(self) -> None:
        pass

    def wait_until(self, predicate: Callable[[], bool], timeout: float | None = None) -> bool:
        """Run the simulation until ``predicate`` holds, the schedule drains, or ``timeout`` ticks pass."""
        deadline = None if timeout is None else self.clock.now + timeout
        events = self.events
        while not predicate():
            nxt = events.peek_tick()
            if nxt is None or (deadline is not None and nxt > deadline):
                return predicate()
            events.advance()
        return True

    def run(self) -> None:
        while len(self.events):
            self.events.advance()


class SimChannel:
    def __init__(self, runtime: SimRuntime, name: str, handler: Callable[[Any], None]):
        self.runtime = runtime
        self.name = name
        self.handler = handler
        self.closed = False

    def post(self, msg: Any) -> None:
        if not self.closed:
            self.runtime.call_later(0, self.name, self._deliver, msg)

    def _deliver(self, msg: Any) -> None:
        if not self.closed:
            self.handler(msg)

    def close(self) -> None:
        self.closed = True

    def on_loop_thread(self) -> bool:
        return True


class _ThreadTimer:
    def __init__(self, delay_s: float, fn, args):
        self._t = threading.Timer(delay_s, fn, args)
        self._t.daemon = True
        self._t.start()

    def cancel(self) -> None:
        self._t.cancel()


class RealRuntime:
    """Wall-clock runtime; timestamps are integer milliseconds since the epoch."""

    simulated = False

    def __init__(self):
        self._cond = threading.Condition()

    def now(self) -> int:
        return int(time.time() * 1000)

    def call_later(self, delay: float, subject_id: str, fn: Callable[..., Any], *args) -> _ThreadTimer:
        return _ThreadTimer(float(delay), fn, args)

    def channel(self, name: str, handler: Callable[[Any], None]) -> ThreadChannel:
        return ThreadChannel(self, name, handler)

    def notify(self) -> None:
        with self._cond:
            self._cond.notify_all()

    def wait_until(self, predicate: Callable[[], bool], timeout: float | None = None) -> bool:
        with self._cond:
            return self._cond.wait_for(predicate, timeout)


_STOP = object()


class ThreadChannel:
    """A mailbox drained by one dedicated thread, preserving post order."""

    def __init__(self, runtime: RealRuntime, name: str, handler: Callable[[Any], None]):
        self.runtime = runtime
        self.name = name
        self.handler = handler
        self.closed = False
        self._inbox: queue.SimpleQueue = queue.SimpleQueue()
        self._thread = threading.Thread(target=self._loop, name=name, daemon=True)
        self._thread.start()

    def post(self, msg: Any) -> None:
        if not self.closed:
            self._inbox.put(msg)

    def _loop(self) -> None:
        while True:
            msg = self._inbox.get()
            if msg is _STOP:
                return
            try:
                self.handler(msg)
            except Exception:
                log.exception("channel %s: handler failed on %r", self.name, msg)

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self._inbox.put(_STOP)

    def on_loop_thread(self) -> bool:
        return threading.current_thread() is self._thread

    def join(self, timeout: float | None = None) -> None:
        if not self.on_loop_thread():
            self._thread.join(timeout)
