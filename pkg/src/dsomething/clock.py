"""Clocks and the cooperative process model.

Long-running loops (agents, the monitor, the cluster driver) are written as
generators that yield the number of seconds they want to wait. The same
generator is driven by :func:`drive` against a real or manual clock, or
scheduled on an :class:`EventLoop` under simulated time.
"""
from __future__ import annotations

import heapq
import threading
import time
from typing import Any, Callable, Generator, Optional

Proc = Generator[float, None, Any]


class StopFlag:
    """Picklable stand-in for ``threading.Event`` when nothing can set it."""

    def is_set(self) -> bool:
        return False


NEVER = StopFlag()


class WallClock:
    def now(self) -> float:
        return time.time()

    def sleep(self, seconds: float, stop: Optional[threading.Event] = None) -> None:
        if stop is not None:
            stop.wait(max(seconds, 0.0))
        else:
            time.sleep(max(seconds, 0.0))


class ManualClock:
    """Time advances only when somebody sleeps."""

    def __init__(self, start: float = 0.0) -> None:
        self.t = float(start)

    def now(self) -> float:
        return self.t

    def sleep(self, seconds: float, stop: Any = None) -> None:
        self.t += max(seconds, 0.0)


def drive(proc: Proc, clock: WallClock | ManualClock, stop: Any = None) -> Any:
    """Run a process generator to completion against ``clock``; return its value."""
    try:
        wait = next(proc)
        while True:
            clock.sleep(wait, stop)
            wait = proc.send(None)
    except StopIteration as done:
        return done.value


class Process:
    def __init__(self, loop: "EventLoop", gen: Proc, on_exit: Callable[[Any], None] | None) -> None:
        self.loop = loop
        self.gen = gen
        self.on_exit = on_exit
        self.alive = True
        self.value: Any = None

    def kill(self) -> None:
        """Abandon the process at its current wait point. ``on_exit`` is not called."""
        if self.alive:
            self.alive = False
            self.gen.close()

    def _step(self) -> None:
        if not self.alive:
            return
        try:
            wait = self.gen.send(None)
        except StopIteration as done:
            self.alive = False
            self.value = done.value
            if self.on_exit is not None:
                self.on_exit(done.value)
            return
        self.loop.call_at(self.loop.now() + max(wait, 0.0), self._step)


class EventLoop:
    """Single-threaded virtual-time scheduler; ties break by insertion order."""

    def __init__(self, start: float = 0.0) -> None:
        self._now = float(start)
        self._heap: list[tuple[float, int, Callable[[], None]]] = []
        self._seq = 0

    def now(self) -> float:
        return self._now

    def call_at(self, when: float, fn: Callable[[], None]) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (max(when, self._now), self._seq, fn))

    def spawn(self, gen: Proc, on_exit: Callable[[Any], None] | None = None) -> Process:
        proc = Process(self, gen, on_exit)
        self.call_at(self._now, proc._step)
        return proc

    def run(self, until: Callable[[], bool] | None = None, horizon: float | None = None) -> None:
        """Dispatch events until ``until()`` holds, the heap empties, or ``horizon`` passes."""
        while self._heap:
            if until is not None and until():
                return
            when, _seq, fn = self._heap[0]
            if horizon is not None and when > horizon:
                self._now = horizon
                return
            heapq.heappop(self._heap)
            self._now = when
            fn()
