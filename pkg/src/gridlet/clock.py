"""Time sources.

Everything that needs "now" takes a clock object instead of calling
``time.time()`` directly, so simulations, token expiry and transfer timing can
be driven deterministically from tests.
"""

import threading
import time


class VirtualClock:
    """Manually advanced clock. Never goes backwards."""

    mode = "manual-advance"
    virtual = True

    def __init__(self, start=0.0):
        self._now = float(start)
        self._lock = threading.Lock()

    def now(self):
        with self._lock:
            return self._now

    def advance(self, seconds):
        if seconds < 0:
            raise ValueError("cannot advance a clock by a negative amount")
        with self._lock:
            self._now += seconds
            return self._now

    def set(self, t):
        with self._lock:
            if t < self._now:
                raise ValueError(f"clock is monotone: {t} < {self._now}")
            self._now = float(t)
            return self._now

    def __repr__(self):
        return f"VirtualClock(now={self._now!r})"


class RealtimeClock:
    """Wall clock, optionally sped up relative to an origin.

    ``advance`` is a no-op: real time cannot be pushed forward, callers that
    model elapsed time check ``virtual`` first.
    """

    mode = "realtime"
    virtual = False

    def __init__(self, speedup=1.0):
        self.speedup = float(speedup)
        self._origin = time.time()

    def now(self):
        t = time.time()
        return self._origin + (t - self._origin) * self.speedup

    def advance(self, seconds):
        return self.now()

