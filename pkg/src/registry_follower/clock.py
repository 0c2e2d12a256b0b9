"""Clock abstraction so every time read can be simulated in tests."""

from __future__ import annotations

import threading
import time


class Clock:
    """Interface: now() in epoch seconds, sleep() in seconds."""

    def now(self) -> float:
        raise NotImplementedError

    def sleep(self, seconds: float) -> None:
        raise NotImplementedError


class SystemClock(Clock):
    def now(self) -> float:
        return time.time()

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds)


class SimulatedClock(Clock):
    """Deterministic clock; sleep() advances simulated time instantly.

    Thread-safe: mock servers read it from handler threads while a driver
    advances it.
    """

    def __init__(self, start: float = 0.0):
        self._now = float(start)
        self._lock = threading.Lock()

    def now(self) -> float:
        with self._lock:
            return self._now

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            with self._lock:
                self._now += seconds

    def advance_to(self, t: float) -> None:
        """Move forward to t; never goes backwards."""
        with self._lock:
            if t > self._now:
                self._now = t
