"""Simulated durable storage with a sampled write latency."""

from __future__ import annotations

import random
from typing import Callable, Optional


class SimDevice:
    """A storage device that completes writes in submission order.

    ``write(apply, done)`` runs ``apply`` (making the data durable) and then
    ``done`` once the sampled latency has passed and every earlier write has
    completed.  :meth:`crash` forgets writes still in flight; a write that
    registered a ``torn`` hook gets it called with a random fraction, to
    model a partially written tail.
    """

    def __init__(self, env, rng: random.Random, latency=(10.0, 10.0)):
        self.env = env
        self.rng = rng
        self.latency = latency
        self._last = 0.0
        self._gen = 0
        self._pending: list = []
        self.bytes_written = 0

    def sample(self) -> float:
        lo, hi = self.latency
        return lo if lo == hi else self.rng.uniform(lo, hi)

    def write(self, apply: Callable[[], None], done: Optional[Callable[[], None]] = None, *, size: int = 0, torn=None) -> None:
        now = self.env.now
        t = max(self._last, now + self.sample())
        self._last = t
        gen = self._gen
        item = (apply, torn)
        self._pending.append(item)

        def fire(_e):
            if gen != self._gen:
                return
            self._pending.remove(item)
            self.bytes_written += size
            apply()
            if done is not None:
                done()

        self.env.timeout(t - now).callbacks.append(fire)

    def crash(self) -> None:
        pending, self._pending = self._pending, []
        self._gen += 1
        self._last = self.env.now
        if pending and pending[0][1] is not None:
            pending[0][1](self.rng.random())


class SyncDevice:
    """Durable as soon as written; used outside the simulator."""

    bytes_written = 0

    def write(self, apply, done=None, *, size: int = 0, torn=None) -> None:
        apply()
        self.bytes_written += size
        if done is not None:
            done()

    def crash(self) -> None:
        pass
