"""Monotonic clocks with sleep-until semantics.

The real pipeline paces against :class:`SystemClock`; tests and the
deterministic single-threaded mode inject :class:`VirtualClock`, which
advances instantly to any slept-for instant so timing laws can be checked
without wall-clock waits.
"""

from __future__ import annotations

import time


class SystemClock:
    """Wall-clock pacing on time.monotonic_ns.

    sleep_until releases the GIL for the bulk of the wait and finishes
    with short naps to keep wakeup error well under a millisecond.
    """

    def now_ns(self) -> int:
        return time.monotonic_ns()

    def sleep_until(self, t_ns: int) -> None:
        while True:
            remaining = t_ns - time.monotonic_ns()
            if remaining <= 0:
                return
            if remaining > 2_000_000:
                time.sleep((remaining - 1_000_000) / 1e9)
            else:
                time.sleep(remaining / 2e9)


class VirtualClock:
    """Simulation clock: sleeping just advances time.

    Not thread-safe; intended for the single-threaded deterministic mode.
    """

    def __init__(self, start_ns: int = 0):
        self._now = start_ns

    def now_ns(self) -> int:
        return self._now

    def sleep_until(self, t_ns: int) -> None:
        if t_ns > self._now:
            self._now = t_ns

    def advance(self, dt_ns: int) -> None:
        self._now += dt_ns
