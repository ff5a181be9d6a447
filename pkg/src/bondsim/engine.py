"""Deterministic discrete-event core: microsecond clock, ordered event queue, seeded RNG."""

from __future__ import annotations

import heapq
import random
from typing import Callable

US_PER_MS = 1_000
US_PER_S = 1_000_000

RNG_ALGORITHM = "mt19937"  # CPython's random.Random


def us_from_ms(ms: float) -> int:
    return round(ms * US_PER_MS)


def us_from_s(s: float) -> int:
    return round(s * US_PER_S)


def ms_from_us(us: int) -> float:
    return us / US_PER_MS


class SchedulingError(Exception):
    """Raised when an event is scheduled before the current simulated time."""


class HandlerError(Exception):
    """Raised when an event handler fails; names the offending event."""


class Event:
    """A scheduled callback. Ties at equal fire time break by issue order (seq)."""

    __slots__ = ("fire_at", "seq", "action", "label", "cancelled", "fired")

    def __init__(self, fire_at: int, seq: int, action: Callable[[], None], label: str):
        self.fire_at = fire_at
        self.seq = seq
        self.action = action
        self.label = label
        self.cancelled = False
        self.fired = False

    def __repr__(self) -> str:
        return f"Event({self.label or 'anon'} @ {self.fire_at}us seq={self.seq})"


class Scheduler:
    """Single-queue event loop over integer microseconds, one per simulation run."""

    def __init__(self, seed: int = 0):
        self.now = 0
        self.seed = seed
        self.rng = random.Random(seed)
        self._heap: list[tuple[int, int, Event]] = []
        self._next_seq = 0

    def schedule_at(self, fire_at: int, action: Callable[[], None], label: str = "") -> Event:
        if fire_at < self.now:
            raise SchedulingError(
                f"cannot schedule '{label or 'anon'}' at {fire_at}us; now is {self.now}us"
            )
        ev = Event(fire_at, self._next_seq, action, label)
        self._next_seq += 1
        heapq.heappush(self._heap, (fire_at, ev.seq, ev))
        return ev

    def schedule_in(self, delay_us: int, action: Callable[[], None], label: str = "") -> Event:
        return self.schedule_at(self.now + delay_us, action, label)

    def cancel(self, ev: Event) -> bool:
        # Lazy deletion: the heap entry is skipped when popped. Idempotent.
        if ev.fired or ev.cancelled:
            return False
        ev.cancelled = True
        return True

    def run_until(self, t: int) -> int:
        """Deliver every event with fire_at <= t in (fire_at, seq) order; ends with now == t."""
        if t < self.now:
            raise SchedulingError(f"cannot run backwards to {t}us; now is {self.now}us")
        fired = 0
        heap = self._heap
        while heap and heap[0][0] <= t:
            fire_at, _, ev = heapq.heappop(heap)
            if ev.cancelled:
                continue
            self.now = fire_at
            ev.fired = True
            try:
                ev.action()
            except Exception as exc:
                raise HandlerError(f"handler failed for {ev!r} at t={self.now}us: {exc}") from exc
            fired += 1
        self.now = t
        return fired

    def pending(self) -> int:
        return sum(1 for _, _, ev in self._heap if not ev.cancelled)
