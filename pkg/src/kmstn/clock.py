"""Wall-clock and simulated time sources.

Components that model delays (QKD service latency, harness back-off) take a
clock instead of calling :mod:`time` directly.  In simulation-time mode a
``sleep`` advances the shared virtual clock instantly.
"""
from __future__ import annotations

import threading
import time


class WallClock:
    sim = False

    def now(self) -> float:
        return time.monotonic()

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds)


class SimClock:
    sim = True

    def __init__(self, start: float = 0.0):
        self._now = float(start)
        self._lock = threading.Lock()

    def now(self) -> float:
        with self._lock:
            return self._now

    def advance(self, seconds: float) -> float:
        if seconds < 0:
            raise ValueError("cannot move simulated time backwards")
        with self._lock:
            self._now += seconds
            return self._now

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            self.advance(seconds)


def make_clock(mode: str):
    if mode == "sim":
        return SimClock()
    if mode == "wall":
        return WallClock()
    raise ValueError(f"unknown time mode {mode!r}")
