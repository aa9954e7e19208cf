"""Virtual and wall-clock time sources.

All times are floats in microseconds. The virtual clock is a deterministic
event scheduler: events fire in (time, priority, submission order) order.
"""

from __future__ import annotations

import heapq
import itertools
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable

# Lower priority values fire first at equal timestamps.
PRIO_CONTROL = -10  # power switching, phase boundaries
PRIO_NETWORK = 0  # message arrivals, input changes
PRIO_CYCLE = 10  # scan-cycle boundaries
PRIO_OBSERVE = 20  # deadlines, collectors


@dataclass(order=True)
class _Scheduled:
    at: float
    priority: int
    seq: int
    fn: Callable[..., Any] = field(compare=False)
    args: tuple = field(compare=False, default=())
    cancelled: bool = field(compare=False, default=False)

    def cancel(self) -> None:
        self.cancelled = True


class VirtualClock:
    """Deterministic discrete-event clock."""

    is_virtual = True

    def __init__(self, start: float = 0.0) -> None:
        self._now = float(start)
        self._queue: list[_Scheduled] = []
        self._seq = itertools.count()

    @property
    def now(self) -> float:
        return self._now

    def schedule(self, at: float, fn: Callable[..., Any], *args: Any,
                 priority: int = PRIO_NETWORK) -> _Scheduled:
        if at < self._now:
            raise ValueError(f"cannot schedule in the past ({at} < {self._now})")
        item = _Scheduled(float(at), priority, next(self._seq), fn, args)
        heapq.heappush(self._queue, item)
        return item

    def call_later(self, delay: float, fn: Callable[..., Any], *args: Any,
                   priority: int = PRIO_NETWORK) -> _Scheduled:
        return self.schedule(self._now + delay, fn, *args, priority=priority)

    def peek(self) -> float | None:
        while self._queue and self._queue[0].cancelled:
            heapq.heappop(self._queue)
        return self._queue[0].at if self._queue else None

    def run_until(self, t: float) -> None:
        """Fire every event with timestamp <= t, then set now = t."""
        queue = self._queue
        while queue and queue[0].at <= t:
            item = heapq.heappop(queue)
            if item.cancelled:
                continue
            self._now = item.at
            item.fn(*item.args)
        if t > self._now:
            self._now = float(t)

    def advance(self, delta: float) -> None:
        self.run_until(self._now + delta)

    def sleep(self, delta: float) -> None:
        self.advance(delta)


class RealClock:
    """Monotonic wall clock, microseconds since construction."""

    is_virtual = False

    def __init__(self) -> None:
        self._t0 = time.perf_counter()

    @property
    def now(self) -> float:
        return (time.perf_counter() - self._t0) * 1e6

    def sleep(self, delta: float) -> None:
        if delta > 0:
            time.sleep(delta / 1e6)

    def sleep_until(self, t: float, stop: threading.Event | None = None) -> bool:
        """Sleep until `t`; returns False if `stop` was set first."""
        while True:
            remaining = t - self.now
            if remaining <= 0:
                return True
            if stop is not None:
                if stop.wait(min(remaining, 50_000) / 1e6):
                    return False
            else:
                time.sleep(remaining / 1e6)


Clock = VirtualClock | RealClock
