"""Event-driven simulation core.

Time is an integer count of nanoseconds. Events at equal times run in
insertion order. All randomness flows through :class:`RandomStream`
objects derived from one master seed, one stream per named consumer.
"""

from __future__ import annotations

import heapq
import zlib
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

NS_PER_US = 1_000
NS_PER_MS = 1_000_000
NS_PER_S = 1_000_000_000


class SchedulingError(ValueError):
    pass


class EventHandle:
    __slots__ = ("time", "seq", "action", "args", "cancelled", "done")

    def __init__(self, time: int, seq: int, action: Callable, args: tuple):
        self.time = time
        self.seq = seq
        self.action = action
        self.args = args
        self.cancelled = False
        self.done = False

    def cancel(self) -> None:
        self.cancelled = True

    def __lt__(self, other: "EventHandle") -> bool:
        return (self.time, self.seq) < (other.time, other.seq)


@dataclass(frozen=True)
class RunStats:
    events_executed: int
    final_clock: int


class Simulator:
    """Virtual clock plus a (time, sequence)-ordered event queue."""

    def __init__(self) -> None:
        self.now = 0
        self._queue: list[EventHandle] = []
        self._seq = 0
        self.events_executed = 0

    def schedule(self, at: int, action: Callable, *args: Any) -> EventHandle:
        at = int(at)
        if at < self.now:
            raise SchedulingError(f"cannot schedule at {at} ns, clock is {self.now} ns")
        handle = EventHandle(at, self._seq, action, args)
        self._seq += 1
        heapq.heappush(self._queue, handle)
        return handle

    def schedule_in(self, delay: int, action: Callable, *args: Any) -> EventHandle:
        return self.schedule(self.now + int(delay), action, *args)

    @staticmethod
    def cancel(handle: EventHandle) -> None:
        handle.cancel()

    def pending(self) -> int:
        return sum(1 for h in self._queue if not h.cancelled)

    def run_until(self, end: int) -> RunStats:
        """Execute every event with time <= ``end``; the clock then rests at ``end``."""
        end = int(end)
        if end < self.now:
            raise SchedulingError(f"end {end} ns is before clock {self.now} ns")
        queue = self._queue
        executed = 0
        while queue and queue[0].time <= end:
            handle = heapq.heappop(queue)
            if handle.cancelled:
                continue
            self.now = handle.time
            handle.done = True
            handle.action(*handle.args)
            executed += 1
        self.now = end
        self.events_executed += executed
        return RunStats(executed, self.now)


def stream_id(name: str) -> int:
    """Stable integer id for a stream name (independent of PYTHONHASHSEED)."""
    return zlib.crc32(name.encode("utf-8"))


class RandomStream:
    """Seeded generator; identical (seed, stream_id) pairs replay identically."""

    def __init__(self, seed: int, stream: int | str = 0):
        self.seed = int(seed) & 0xFFFF_FFFF_FFFF_FFFF
        self.stream_id = stream_id(stream) if isinstance(stream, str) else int(stream)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,))
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def uniform(self) -> float:
        return float(self._gen.random())

    def normal(self, mean: float = 0.0, std: float = 1.0) -> float:
        if std == 0.0:
            return float(mean)
        return float(self._gen.normal(mean, std))

    def choice(self, weights) -> int:
        """Index drawn with probability proportional to ``weights``."""
        w = np.asarray(weights, dtype=float)
        cdf = np.cumsum(w / w.sum())
        return int(min(np.searchsorted(cdf, self.uniform(), side="right"), len(w) - 1))

    def uniforms(self, n: int) -> np.ndarray:
        return self._gen.random(n)


class StreamFactory:
    """Hands out one named stream per consumer, all derived from a master seed."""

    def __init__(self, seed: int):
        self.seed = seed
        self._streams: dict[str, RandomStream] = {}

    def get(self, name: str) -> RandomStream:
        s = self._streams.get(name)
        if s is None:
            s = self._streams[name] = RandomStream(self.seed, name)
        return s


def uniform(stream: RandomStream) -> float:
    return stream.uniform()
