"""Discrete-event scheduler providing a single source of simulated time.

Events are ordered by ``(time, priority, insertion order)`` so equal-time
events always run in the same module order. In VIRTUAL mode time jumps from
event to event, optionally paced to ``speedup`` times the wall clock; in
REAL_TIME mode the pace is the wall clock itself.
"""
from __future__ import annotations

import enum
import heapq
import itertools
import math
import time


class Priority(enum.IntEnum):
    GRID = 0
    DEVICES = 1
    CHANNEL = 2
    COORDINATOR = 3
    ESTIMATOR = 4
    RECORDER = 5


class TimeMode(str, enum.Enum):
    VIRTUAL = "VIRTUAL"
    REAL_TIME = "REAL_TIME"


class Scheduler:
    def __init__(self, mode: TimeMode | str = TimeMode.VIRTUAL, speedup: float | None = None,
                 wall_clock=time.monotonic, sleep=time.sleep):
        self.mode = TimeMode(mode)
        if self.mode is TimeMode.REAL_TIME:
            speedup = 1.0
        if speedup is not None and not speedup >= 1.0:
            raise ValueError("speedup must be >= 1")
        self.speedup = speedup
        self._wall = wall_clock
        self._sleep = sleep
        self._queue: list = []
        self._seq = itertools.count()
        self.now = 0.0
        self.executed = 0
        self.max_lag = 0.0  # worst wall-clock lateness seen while pacing (s)
        self._wall_start = None

    def at(self, t: float, priority: Priority | int, fn, *args):
        """Run ``fn(now, *args)`` at simulated time ``t`` (never in the past)."""
        if t < self.now:
            t = self.now
        heapq.heappush(self._queue, (float(t), int(priority), next(self._seq), fn, args))

    def every(self, period: float, priority: Priority | int, fn, start: float = 0.0,
              until: float = math.inf):
        """Run ``fn(now)`` at ``start + k * period`` for k = 0, 1, ..."""
        if not period > 0:
            raise ValueError("period must be positive")

        def fire(now, k):
            fn(now)
            t = start + (k + 1) * period
            if t <= until:
                self.at(t, priority, fire, k + 1)

        self.at(start, priority, fire, 0)

    def peek(self) -> float | None:
        return self._queue[0][0] if self._queue else None

    def run(self, until: float):
        """Execute events with time <= ``until``; leaves later events queued."""
        paced = self.speedup is not None and math.isfinite(self.speedup)
        if paced and self._wall_start is None:
            self._wall_start = self._wall() - self.now / self.speedup
        queue = self._queue
        while queue and queue[0][0] <= until:
            t, _, _, fn, args = heapq.heappop(queue)
            if paced:
                target = self._wall_start + t / self.speedup
                ahead = target - self._wall()
                if ahead > 0:
                    self._sleep(ahead)
                else:
                    self.max_lag = max(self.max_lag, -ahead)
            self.now = t
            fn(t, *args)
            self.executed += 1
        if until > self.now and math.isfinite(until):
            self.now = until
