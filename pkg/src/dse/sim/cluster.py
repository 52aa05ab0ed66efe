"""Deterministic in-process cluster: object nodes, the coordinator, faults."""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Any, Optional

import simpy

from ..coordinator import Coordinator, MemoryLog
from ..oracles import commit_ends
from ..runtime import Runtime, RuntimeConfig
from .network import Envelope, Network
from .storage import SimDevice
from .trace import TraceLog

COORD = "coord"
FAULT_KINDS = ("crash", "restart", "crash_coordinator", "restart_coordinator")


class UnknownTarget(KeyError):
    pass


class ScenarioPanic(AssertionError):
    """An invariant assertion fired inside the simulation."""


@dataclass(frozen=True)
class Fault:
    t: float
    kind: str
    target: Any = None

    def __post_init__(self):
        if self.kind not in FAULT_KINDS:
            raise ValueError(f"unknown fault kind {self.kind!r}")
        if self.t < 0:
            raise ValueError("fault time must be non-negative")

    def as_dict(self) -> dict:
        return {"t": self.t, "kind": self.kind, "target": self.target}


@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    delay: tuple = (0.1, 0.3)
    loss: float = 0.0
    persist_latency: tuple = (10.0, 10.0)
    log_latency: tuple = (1.0, 1.0)
    commit_period: float = 10.0
    faults: tuple = ()
    horizon: float = 2000.0
    drain: float = 500.0
    buffer_capacity: int = 1024

    def __post_init__(self):
        if not 0.0 <= self.loss <= 1.0:
            raise ValueError("loss probability must be in [0, 1]")
        for lo, hi in (self.delay, self.persist_latency, self.log_latency):
            if lo < 0 or hi < lo:
                raise ValueError("latency ranges must satisfy 0 <= lo <= hi")
        if not self.commit_period > 0:
            raise ValueError("commit_period must be positive")
        ts = [f.t for f in self.faults]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("fault times must be strictly increasing")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


class Node:
    """Common plumbing: liveness, owned processes, reply mailbox."""

    def __init__(self, cluster: "Cluster", name):
        self.cluster = cluster
        self.env = cluster.env
        self.name = name
        self.alive = False
        self.incarnation = 0
        self.procs: set = set()
        self.waiting: dict = {}

    def emit(self, kind, **fields):
        return self.cluster.trace.emit(kind, obj=self.name, inc=self.incarnation, **fields)

    def spawn(self, gen):
        p = self.env.process(self._guard(gen))
        self.procs.add(p)
        p.callbacks.append(lambda _e, p=p: self.procs.discard(p))
        return p

    def _guard(self, gen):
        try:
            return (yield from gen)
        except simpy.Interrupt:
            return None

    def stop_procs(self):
        for p in list(self.procs):
            if p.is_alive:
                p.interrupt("crash")
        self.procs.clear()
        self.waiting.clear()

    def expect(self, rid):
        ev = self.env.event()
        self.waiting[rid] = ev
        return ev

    def forget(self, rid):
        self.waiting.pop(rid, None)

    def on_message(self, envl: Envelope):
        rid = getattr(envl.body, "reply_for", None)
        if rid is not None:
            ev = self.waiting.pop(rid, None)
            if ev is None or ev.triggered:
                self.emit("drop", mid=envl.mid, reason="orphan")
            else:
                ev.succeed(envl)
            return
        self.handle(envl)

    def handle(self, envl: Envelope):
        self.emit("drop", mid=envl.mid, reason="orphan")

    def send(self, dst, body, header=None) -> int:
        return self.cluster.net.send(self.name, dst, body, header)


class _Link:
    def __init__(self, node: "ObjectNode", rt_ref):
        self.node = node
        self.rt_ref = rt_ref

    def send(self, msg):
        if self.node.alive and self.node.rt is self.rt_ref[0]:
            self.node.cluster.net.control(self.node.name, COORD, msg)


class ObjectNode(Node):
    """A state object: its runtime, its service logic, its storage device."""

    def __init__(self, cluster, obj: int, service):
        super().__init__(cluster, obj)
        self.obj = obj
        self.service = service
        self.rt: Optional[Runtime] = None
        service.attach(self)

    def start(self):
        self.alive = True
        self.incarnation += 1
        inc = self.incarnation
        cfg = self.cluster.config
        ref = [None]
        trace = lambda kind, **f: self.cluster.trace.emit(kind, obj=self.obj, inc=inc, **f)  # noqa: E731
        self.rt = Runtime(
            RuntimeConfig(self.obj, cfg.commit_period, COORD, cfg.buffer_capacity),
            self.service.backend,
            _Link(self, ref),
            clock=lambda: self.env.now,
            trace=trace,
        )
        ref[0] = self.rt
        self.rt.begin_connect()
        self.spawn(self._ticker())
        self.service.on_start()

    def _ticker(self):
        rt = self.rt
        while True:
            nxt = rt._tick_after(self.env.now)
            yield self.env.timeout(nxt - self.env.now)
            rt.refresh()
            self.service.on_tick()

    def on_control(self, src, msg):
        self.rt.deliver(msg)

    def handle(self, envl):
        self.spawn(self.service.handle(envl))

    def crash(self):
        self.emit("crash")
        self.alive = False
        self.rt.kill()
        self.stop_procs()
        backend = self.service.backend
        shadow = bytes(backend.buf) if hasattr(backend, "buf") else None
        self.service.crash()
        if shadow is not None:
            got = bytes(backend.durable)
            self.emit(
                "log_recovered",
                length=len(got),
                written=len(shadow),
                prefix=shadow.startswith(got),
                at_commit=not got or len(got) in commit_ends(shadow),
            )

    def restart(self):
        self.emit("restart")
        self.start()


class CoordNode(Node):
    def __init__(self, cluster):
        super().__init__(cluster, COORD)
        rng = cluster.stream("coord-log")
        lo, hi = cluster.config.log_latency
        self.log = MemoryLog(schedule=self._schedule, latency=lambda: lo if lo == hi else rng.uniform(lo, hi))
        self.coord: Optional[Coordinator] = None
        self.log_appends_at_start = 0

    def _schedule(self, delay, fn):
        self.env.timeout(delay).callbacks.append(lambda _e: fn())

    def start(self):
        self.alive = True
        self.incarnation += 1
        inc = self.incarnation
        trace = lambda kind, **f: self.cluster.trace.emit(kind, obj=COORD, inc=inc, **f)  # noqa: E731
        net = self.cluster.net

        def send(dst, msg):
            if self.alive and self.coord is c_ref[0]:
                net.control(COORD, dst, msg)

        c_ref = [None]
        self.coord = Coordinator(self.log, send, trace=trace, incarnation=inc)
        c_ref[0] = self.coord
        self.coord.start()
        self.spawn(self._ticker())

    def _ticker(self):
        c = self.cluster.config.commit_period
        while True:
            yield self.env.timeout(c)
            self.coord.tick()

    def on_control(self, src, msg):
        self.coord.submit(msg)

    def crash(self):
        self.emit("crash")
        self.alive = False
        self.log.crash()
        self.stop_procs()

    def restart(self):
        self.emit("restart")
        self.start()


class Cluster:
    def __init__(self, config: SimConfig):
        self.config = config
        self.env = simpy.Environment()
        self._root = random.Random(config.seed)
        self.trace = TraceLog(lambda: self.env.now)
        self.net = Network(self.env, self.stream("net"), self.trace, config.delay, config.loss)
        self.objects: dict = {}
        self.clients: dict = {}
        self.coord = CoordNode(self)
        self.net.nodes[COORD] = self.coord
        self.metrics: dict = {}

    @staticmethod
    def stream_for(seed: int, name: str) -> random.Random:
        """A named random stream derived from a run seed."""
        return random.Random(f"{seed}/{name}")

    def stream(self, name: str) -> random.Random:
        return self.stream_for(self.config.seed, name)

    def device(self, name) -> SimDevice:
        return SimDevice(self.env, self.stream(f"dev/{name}"), self.config.persist_latency)

    def add_object(self, obj: int, service) -> ObjectNode:
        node = ObjectNode(self, obj, service)
        self.objects[obj] = node
        self.net.nodes[obj] = node
        return node

    def add_client(self, node: Node) -> Node:
        self.clients[node.name] = node
        self.net.nodes[node.name] = node
        node.alive = True
        return node

    def start(self):
        self.coord.start()
        for obj in sorted(self.objects):
            self.objects[obj].start()
        for f in self.config.faults:
            self._arm(f)

    def _arm(self, f: Fault):
        if f.kind in ("crash", "restart") and f.target not in self.objects:
            raise UnknownTarget(f.target)
        self.env.timeout(f.t).callbacks.append(lambda _e: self.inject(f))

    def inject(self, f: Fault):
        if f.kind == "crash":
            node = self.objects[f.target]
            if node.alive:
                node.crash()
        elif f.kind == "restart":
            node = self.objects[f.target]
            if not node.alive:
                node.restart()
        elif f.kind == "crash_coordinator":
            if self.coord.alive:
                self.coord.crash()
        elif f.kind == "restart_coordinator":
            if not self.coord.alive:
                self.coord.restart()

    def run(self, until: Optional[float] = None):
        self.env.run(until=until if until is not None else self.config.horizon + self.config.drain)


def random_faults(rng: random.Random, objects, horizon: float, max_crashes: int = 3, coord_weight: float = 1.0) -> tuple:
    """Up to ``max_crashes`` crash/restart pairs spread over the first 80% of ``horizon``.

    Every object has weight 1 and the coordinator ``coord_weight``; downtimes
    are 5 to 50 ms.  Crash windows never overlap.
    """
    n = rng.randint(1, max_crashes)
    targets = list(objects) + [COORD]
    weights = [1.0] * len(objects) + [coord_weight]
    out = []
    t = rng.uniform(0.1, 0.3) * horizon
    for _ in range(n):
        if t > 0.8 * horizon:
            break
        who = rng.choices(targets, weights)[0]
        down = rng.uniform(5.0, 50.0)
        t = round(t, 3)
        r = round(t + down, 3)
        if who == COORD:
            out += [Fault(t, "crash_coordinator"), Fault(r, "restart_coordinator")]
        else:
            out += [Fault(t, "crash", who), Fault(r, "restart", who)]
        t = r + rng.uniform(0.05, 0.25) * horizon
    return tuple(out)
