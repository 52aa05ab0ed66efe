"""Simulated message channels.

Application messages see a sampled delay and independent loss.  Control
traffic between runtimes and the coordinator is reliable and FIFO per
link, as a TCP connection would be; it is still lost when the receiving
endpoint is down.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Any

from ..core import Header


@dataclass(frozen=True)
class Envelope:
    mid: int
    src: Any
    dst: Any
    body: Any
    header: Header | None = None


def header_json(h: Header | None):
    if h is None:
        return None
    return {"wl": h.world_line, "deps": sorted(list(d) for d in h.deps)}


class Network:
    def __init__(self, env, rng: random.Random, trace, delay=(0.1, 0.3), loss: float = 0.0):
        if not 0.0 <= loss <= 1.0:
            raise ValueError("loss probability must be in [0, 1]")
        if delay[0] < 0 or delay[1] < delay[0]:
            raise ValueError("bad delay range")
        self.env = env
        self.rng = rng
        self.trace = trace
        self.delay = delay
        self.loss = loss
        self.nodes: dict = {}
        self._fifo: dict = {}
        self._mid = 0
        self.sent = 0
        self.lost = 0
        self.dead_drops = 0

    def _sample(self) -> float:
        lo, hi = self.delay
        return lo if lo == hi else self.rng.uniform(lo, hi)

    def send(self, src, dst, body, header: Header | None = None) -> int:
        """Send an application message; returns its id."""
        self._mid += 1
        mid = self._mid
        self.sent += 1
        self.trace.emit("send", mid=mid, src=src, dst=dst, type=type(body).__name__, header=header_json(header))
        if self.loss and self.rng.random() < self.loss:
            self.lost += 1
            self.trace.emit("drop", mid=mid, reason="loss")
            return mid
        env = Envelope(mid, src, dst, body, header)
        self._after(self._sample(), lambda: self._arrive(env))
        return mid

    def control(self, src, dst, msg) -> None:
        now = self.env.now
        t = max(self._fifo.get((src, dst), 0.0), now + self._sample())
        self._fifo[(src, dst)] = t
        self._after(t - now, lambda: self._arrive_ctl(src, dst, msg))

    def _after(self, delay: float, fn) -> None:
        ev = self.env.timeout(delay)
        ev.callbacks.append(lambda _e: fn())

    def _arrive(self, env: Envelope) -> None:
        node = self.nodes.get(env.dst)
        if node is None or not node.alive:
            self.dead_drops += 1
            self.trace.emit("drop", mid=env.mid, reason="dead")
            return
        self.trace.emit("deliver", mid=env.mid, dst=env.dst)
        node.on_message(env)

    def _arrive_ctl(self, src, dst, msg) -> None:
        node = self.nodes.get(dst)
        if node is None or not node.alive:
            return
        node.on_control(src, msg)
