"""Window-based draining of in-flight messages.

Once every rank has stopped sending, the receive queues are polled one
window at a time. A window counts the messages that *arrived* during it
(delivery time after the window opened); messages already waiting when
draining starts are collected but do not count as arrivals. Draining stops
after the first window with no arrivals, so a schedule whose latest
message lands ``L`` after draining starts needs ``ceil(L / W) + 1``
windows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from ..errors import DrainTimeout


@dataclass(frozen=True)
class DrainPolicy:
    window: float = 10
    max_windows: int = 64

    def __post_init__(self) -> None:
        if not self.window > 0:
            raise ValueError("drain window must be positive")
        if self.max_windows < 2:
            raise ValueError("max_windows must be at least 2")

    @classmethod
    def wall_default(cls) -> "DrainPolicy":
        return cls(window=100.0)

    def expected_windows(self, max_latency: float) -> int:
        return math.ceil(max_latency / self.window) + 1


@dataclass
class DrainResult:
    drained: int
    windows: int
    per_window: list[int]


class Drainer:
    """Tracks one rank's drain. Call ``window()`` after each window has elapsed."""

    def __init__(self, fabric, queues, policy: DrainPolicy, sink):
        self.fabric = fabric
        self.queues = list(queues)  # (mode, queue pair)
        self.policy = policy
        self.sink = sink
        self.start = fabric.clock.now()
        self.per_window: list[int] = []
        self.drained = 0
        self.done = False

    def window(self) -> int:
        opened = self.start + len(self.per_window) * self.policy.window
        arrivals = 0
        for mode, qp in self.queues:
            while True:
                batch = self.fabric.poll_recv(qp, 256)
                if not batch:
                    break
                for d in batch:
                    self.sink(mode, d.payload)
                    if d.deliver_at > opened:
                        arrivals += 1
                self.drained += len(batch)
        self.per_window.append(arrivals)
        if arrivals == 0:
            self.done = True
        elif len(self.per_window) >= self.policy.max_windows:
            raise DrainTimeout(
                f"messages still arriving after {len(self.per_window)} windows of "
                f"{self.policy.window:g}")
        return arrivals

    def result(self) -> DrainResult:
        return DrainResult(self.drained, len(self.per_window), list(self.per_window))


def drain(fabric, queues, policy: DrainPolicy, sink=None, sleep=None) -> DrainResult:
    """Drain ``queues`` for a single caller that owns the passage of time."""
    sleep = sleep or fabric.clock.sleep
    collected = []
    d = Drainer(fabric, queues, policy, sink or (lambda mode, payload: collected.append(payload)))
    while not d.done:
        sleep(policy.window)
        d.window()
    return d.result()
