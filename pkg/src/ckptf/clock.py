"""Time sources. Virtual ticks for deterministic runs, milliseconds for wall runs."""

from __future__ import annotations

import threading
import time
from enum import Enum


class ClockMode(str, Enum):
    VIRTUAL = "virtual"
    WALL = "wall"


class VirtualClock:
    mode = ClockMode.VIRTUAL

    def __init__(self, start: int = 0):
        self._now = start

    def now(self) -> int:
        return self._now

    def advance(self, ticks: int) -> int:
        if ticks < 0:
            raise ValueError("cannot move a clock backwards")
        self._now += ticks
        return self._now

    def advance_to(self, t: int) -> int:
        if t > self._now:
            self._now = t
        return self._now

    def sleep(self, ticks: int) -> None:
        self.advance(ticks)


class WallClock:
    """Milliseconds since construction, as a float."""

    mode = ClockMode.WALL

    def __init__(self):
        self._t0 = time.monotonic()
        self._lock = threading.Lock()

    def now(self) -> float:
        return (time.monotonic() - self._t0) * 1000.0

    def sleep(self, ms: float) -> None:
        if ms > 0:
            time.sleep(ms / 1000.0)

    def advance_to(self, t: float) -> float:
        self.sleep(t - self.now())
        return self.now()
