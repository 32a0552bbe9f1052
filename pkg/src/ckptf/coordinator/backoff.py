"""Staggered connection start-up and a connection-limited test double.

Ranks are split into stagger groups of at most ``max_concurrent_bursts``
members. Group ``k`` starts connecting at ``k * base_delay`` plus uniform
jitter, so with ``base_delay >= handshake + jitter`` no more than
``max_concurrent_bursts`` handshakes ever overlap. ``base_delay = jitter = 0``
reproduces the unstaggered storm.
"""

from __future__ import annotations

import heapq
import math
import random
import threading
from dataclasses import dataclass, field

from ..errors import ConnectionKilled, LaunchError


@dataclass(frozen=True)
class BackoffPolicy:
    base_delay: float = 0.0
    jitter: float = 0.0
    max_concurrent_bursts: int = 8
    max_retries: int = 3
    retry_delay: float = 1.0

    def __post_init__(self) -> None:
        if self.base_delay < 0 or self.jitter < 0 or self.retry_delay < 0:
            raise ValueError("delays must be non-negative")
        if self.max_concurrent_bursts < 1:
            raise ValueError("max_concurrent_bursts must be >= 1")

    @classmethod
    def storm(cls) -> "BackoffPolicy":
        """Everyone connects at once and nobody retries."""
        return cls(base_delay=0.0, jitter=0.0, max_retries=0)

    @classmethod
    def staggered(cls, handshake: float, max_concurrent_bursts: int = 8,
                  jitter: float = 0.0) -> "BackoffPolicy":
        return cls(base_delay=handshake + jitter, jitter=jitter,
                   max_concurrent_bursts=max_concurrent_bursts)

    def stagger_groups(self, n_ranks: int) -> int:
        return max(1, math.ceil(n_ranks / self.max_concurrent_bursts))

    def start_time(self, rank: int, n_ranks: int, rng: random.Random) -> float:
        slot = rank % self.stagger_groups(n_ranks)
        return self.base_delay * slot + (rng.uniform(0, self.jitter) if self.jitter else 0.0)

    def retry_backoff(self, attempt: int, rng: random.Random) -> float:
        return self.retry_delay * (2 ** attempt) + (rng.uniform(0, self.jitter) if self.jitter else 0.0)


class ConnectionLimiter:
    """Test double for a coordinator host that cannot absorb connection bursts.

    Each attempt holds a slot for ``handshake`` time units. An attempt that
    finds ``limit`` slots busy is killed (``kill_on_overload``) or refused;
    a refused attempt may be retried, a killed one may not.
    """

    def __init__(self, limit: int, handshake: float = 1.0, kill_on_overload: bool = True):
        self.limit = limit
        self.handshake = handshake
        self.kill_on_overload = kill_on_overload
        self._active: list[float] = []
        self._lock = threading.Lock()
        self.peak = 0
        self.attempts = 0
        self.rejected = 0

    def attempt(self, now: float) -> float:
        """Start a handshake at ``now``; returns its completion time."""
        with self._lock:
            self.attempts += 1
            while self._active and self._active[0] <= now:
                heapq.heappop(self._active)
            if len(self._active) >= self.limit:
                self.rejected += 1
                raise ConnectionKilled(
                    f"{len(self._active)} concurrent handshakes at t={now:g}"
                    + (" (killed)" if self.kill_on_overload else " (refused)"))
            end = now + self.handshake
            heapq.heappush(self._active, end)
            self.peak = max(self.peak, len(self._active))
            return end


@dataclass
class ConnectReport:
    start_times: dict[int, float] = field(default_factory=dict)
    connected_at: dict[int, float] = field(default_factory=dict)
    failed: dict[int, str] = field(default_factory=dict)
    attempts: int = 0
    peak_concurrent: int = 0

    @property
    def ok(self) -> bool:
        return not self.failed


def simulate_connects(clients, policy: BackoffPolicy, limiter: ConnectionLimiter | None,
                      seed: int = 0, handshake: float = 1.0) -> ConnectReport:
    """Play out the connection phase in virtual time.

    ``clients`` are the ids that connect to the limited endpoint (ranks in
    FLAT mode, sub-coordinators in TREE mode). Attempts are processed in
    start-time order, ties broken by id.
    """
    clients = list(clients)
    rng = random.Random(seed)
    report = ConnectReport()
    events = []
    for idx, c in enumerate(clients):
        t = policy.start_time(idx, len(clients), rng)
        report.start_times[c] = t
        heapq.heappush(events, (t, idx, c, 0))
    active: list[float] = []
    while events:
        t, idx, c, attempt = heapq.heappop(events)
        report.attempts += 1
        try:
            if limiter is not None:
                end = limiter.attempt(t)
            else:
                while active and active[0] <= t:
                    heapq.heappop(active)
                end = t + handshake
                heapq.heappush(active, end)
                report.peak_concurrent = max(report.peak_concurrent, len(active))
            report.connected_at[c] = end
        except ConnectionKilled as exc:
            if limiter.kill_on_overload or attempt >= policy.max_retries:
                report.failed[c] = str(exc)
            else:
                heapq.heappush(events, (t + policy.retry_backoff(attempt, rng), idx, c, attempt + 1))
    if limiter is not None:
        report.peak_concurrent = limiter.peak
    return report


def connect_with_backoff(policy: BackoffPolicy, index: int, n_clients: int, connect, clock,
                         rng: random.Random, limiter: ConnectionLimiter | None = None):
    """Wait for this client's stagger slot, then call ``connect()``.

    Used by threaded (WALL clock) launches. Refused attempts are retried up
    to ``policy.max_retries`` times; a killed attempt or exhausted retries
    raise ``LaunchError``.
    """
    clock.sleep(policy.start_time(index, n_clients, rng))
    for attempt in range(policy.max_retries + 1):
        try:
            if limiter is not None:
                limiter.attempt(clock.now())
            return connect()
        except ConnectionKilled as exc:
            if limiter.kill_on_overload or attempt == policy.max_retries:
                raise LaunchError(f"client {index}: {exc}", failed_ranks=[index]) from exc
            clock.sleep(policy.retry_backoff(attempt, rng))
    raise AssertionError("unreachable")
