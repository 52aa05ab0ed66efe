"""Named workloads for the simulator.

Object ids: the orchestrator (chain, counter) or commit coordinator (tpc)
is object 1; services or participants follow from 2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

from ..services.base import Request
from ..services.counter import SessionCounterService, StepService
from ..services.tpc import TpcCoordinator, TpcParticipant
from ..services.workflow import WorkflowService
from .cluster import COORD, Cluster, Fault, Node, SimConfig, random_faults

SCENARIOS = ("chain", "tpc", "counter", "recovery-chain", "recovery-tpc")
MODES = ("speculative", "baseline")


class InvalidSpec(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioSpec:
    name: str = "chain"
    mode: str = "speculative"
    services: int = 3
    participants: int = 4
    clients: int = 8
    commit_period: float = 10.0
    rate: float = 100.0
    duration: float = 2000.0
    requests: Optional[int] = None
    seeds: tuple = (0,)
    faults: Optional[tuple] = None
    persist_latency: Optional[tuple] = None
    delay: tuple = (0.1, 0.3)
    loss: float = 0.0
    drain: float = 1000.0
    max_crashes: int = 3

    def __post_init__(self):
        if self.name not in SCENARIOS:
            raise InvalidSpec(f"scenario: unknown {self.name!r}; expected one of {', '.join(SCENARIOS)}")
        if self.mode not in MODES:
            raise InvalidSpec(f"mode: expected speculative or baseline, got {self.mode!r}")
        for f in ("commit_period", "rate", "duration"):
            if not getattr(self, f) > 0:
                raise InvalidSpec(f"{f}: must be positive")
        if self.services < 0:
            raise InvalidSpec("services: must be >= 0")
        if self.participants < 1:
            raise InvalidSpec("participants: must be >= 1")
        if self.clients < 1:
            raise InvalidSpec("clients: must be >= 1")
        if self.requests is not None and self.requests < 1:
            raise InvalidSpec("requests: must be >= 1")
        if not self.seeds:
            raise InvalidSpec("seeds: must not be empty")
        if not 0.0 <= self.loss <= 1.0:
            raise InvalidSpec("loss: must be in [0, 1]")

    def sim_config(self, seed: int) -> SimConfig:
        pl = self.persist_latency
        if pl is None:
            pl = (0.5, 1.5) if "tpc" in self.name else (10.0, 10.0)
        faults = self.faults
        if faults is None and self.name.startswith("recovery"):
            rng = Cluster.stream_for(seed, "faults")
            faults = random_faults(rng, self.object_ids(), self.duration, self.max_crashes)
        return SimConfig(
            seed=seed,
            delay=tuple(self.delay),
            loss=self.loss,
            persist_latency=tuple(pl),
            commit_period=self.commit_period,
            faults=tuple(faults or ()),
            horizon=self.duration,
            drain=self.drain,
        )

    def object_ids(self) -> list:
        if "tpc" in self.name:
            return list(range(1, self.participants + 2))
        if self.name == "counter":
            return [1, 2]
        return list(range(1, self.services + 2))


@dataclass
class RequestRecord:
    rid: str
    start: float
    end: Optional[float] = None
    ok: bool = False
    aborted: bool = False
    attempts: int = 0
    replied: bool = False

    @property
    def latency(self) -> Optional[float]:
        return None if self.end is None else self.end - self.start


@dataclass
class RunResult:
    spec: ScenarioSpec
    seed: int
    cluster: Cluster
    requests: list = field(default_factory=list)

    @property
    def trace(self):
        return self.cluster.trace

    def metrics(self) -> dict:
        done = [r for r in self.requests if r.ok]
        lat = sorted(r.latency for r in done)
        c = self.cluster
        out = {
            "scenario": self.spec.name,
            "mode": self.spec.mode,
            "seed": self.seed,
            "issued": len(self.requests),
            "completed": len(done),
            "aborted": sum(r.aborted for r in self.requests),
            "mean_latency_ms": _r(sum(lat) / len(lat)) if lat else None,
            "p95_latency_ms": _r(lat[min(len(lat) - 1, math.ceil(0.95 * len(lat)) - 1)]) if lat else None,
            "delivery_starvation": sum(1 for r in self.requests if not r.replied),
            "persisted_bytes": sum(getattr(n.service.backend.device, "bytes_written", 0) for n in c.objects.values()),
            "messages_sent": c.net.sent,
            "messages_lost": c.net.lost,
            "coordinator_log_entries": c.coord.log.appends,
            "rollbacks_planned": c.coord.coord.seq if c.coord.coord is not None else 0,
            "recovery_ms": _recovery_times(c.trace.records),
            "faults": [f.as_dict() for f in c.config.faults],
        }
        return out


def _r(x: float) -> float:
    return round(x, 6)


def _recovery_times(records) -> list:
    """Restart-to-rejoin time for every restart in the trace."""
    out = []
    pending = {}
    for r in records:
        k = r["kind"]
        if k == "restart":
            pending[(r["obj"], r["inc"] + 1)] = r["t"]
        elif k == "connected" and (r["obj"], r["inc"]) in pending:
            out.append(_r(r["t"] - pending.pop((r["obj"], r["inc"]))))
        elif k == "coord_recover_done" and (COORD, r["inc"]) in pending:
            out.append(_r(r["t"] - pending.pop((COORD, r["inc"]))))
    return out


class ChainClient(Node):
    """Open-loop workflow client: exponential inter-arrival times at ``rate`` per second."""

    timeout = 400.0
    max_attempts = 5

    def __init__(self, cluster, name, spec: ScenarioSpec, result: RunResult):
        super().__init__(cluster, name)
        self.spec = spec
        self.result = result
        self.rng = cluster.stream(f"client/{name}")
        self.chain = tuple(range(2, spec.services + 2))

    def run(self):
        env = self.env
        n = 0
        limit = self.spec.requests
        while env.now < self.spec.duration and (limit is None or n < limit):
            yield env.timeout(self.rng.expovariate(self.spec.rate / 1000.0))
            if env.now >= self.spec.duration:
                break
            rec = RequestRecord(f"wf{n}", env.now)
            self.result.requests.append(rec)
            self.spawn(self.one(rec))
            n += 1

    def one(self, rec: RequestRecord):
        env = self.env
        for a in range(self.max_attempts):
            rec.attempts += 1
            rid = f"{rec.rid}/{a}"
            ev = self.expect(rid)
            self.send(1, Request(rid, "execute", (rec.rid, self.chain)))
            got = yield ev | env.timeout(self.timeout)
            if ev not in got:
                self.forget(rid)
                continue
            rep = got[ev]
            rec.replied = True
            self.emit("recv", mid=rep.mid)
            if rep.body.ok:
                rec.ok, rec.end = True, env.now
                return
        rec.aborted = True


class TpcClient(Node):
    """Closed-loop 2PC client."""

    timeout = 1000.0

    def __init__(self, cluster, name, spec: ScenarioSpec, result: RunResult, quota: list):
        super().__init__(cluster, name)
        self.spec = spec
        self.result = result
        self.quota = quota
        self.parts = list(range(2, spec.participants + 2))

    def run(self):
        env = self.env
        n = 0
        while env.now < self.spec.duration and self.quota[0] > 0:
            self.quota[0] -= 1
            tx = f"{self.name}-t{n}"
            n += 1
            rec = RequestRecord(tx, env.now)
            self.result.requests.append(rec)
            yield from self.one(rec)

    def _call(self, dst, op, args, header=None):
        rid = f"{op}/{args[0]}/{dst}"
        ev = self.expect(rid)
        self.send(dst, Request(rid, op, args), header)
        return rid, ev

    def one(self, rec: RequestRecord):
        env = self.env
        tx = rec.rid
        rec.attempts = 1
        calls = [self._call(p, "txstart", (tx,)) for p in self.parts]
        deadline = env.timeout(self.timeout)
        headers = []
        for rid, ev in calls:
            got = yield ev | deadline
            if ev not in got:
                for r, _e in calls:
                    self.forget(r)
                rec.aborted, rec.end = True, env.now
                self.emit("tx_result", tx=tx, commit=False, why="txstart timeout")
                return
            rep = got[ev]
            rec.replied = True
            self.emit("recv", mid=rep.mid)
            if not rep.body.ok:
                rec.aborted, rec.end = True, env.now
                self.emit("tx_result", tx=tx, commit=False, why=rep.body.error)
                return
            headers.append(rep.header)
        rid, ev = self._call(1, "commit", (tx, tuple(headers)))
        got = yield ev | env.timeout(self.timeout)
        if ev not in got:
            self.forget(rid)
            rec.aborted, rec.end = True, env.now
            self.emit("tx_result", tx=tx, commit=False, why="decision timeout")
            return
        rep = got[ev]
        self.emit("recv", mid=rep.mid)
        commit = bool(rep.body.value)
        rec.end = env.now
        rec.ok = commit
        rec.aborted = not commit
        self.emit("tx_result", tx=tx, commit=commit, latency=_r(rec.latency))


class CounterClient(Node):
    """Sessions of three increments on one counter; the third waits for a barrier.

    Even sessions use counter 1, odd ones counter 2.
    """

    timeout = 1000.0

    def __init__(self, cluster, name, spec, result):
        super().__init__(cluster, name)
        self.spec = spec
        self.result = result
        self.rng = cluster.stream(f"client/{name}")

    def run(self):
        env = self.env
        n = 0
        while env.now < self.spec.duration:
            yield env.timeout(self.rng.expovariate(self.spec.rate / 1000.0))
            if env.now >= self.spec.duration:
                break
            rec = RequestRecord(f"{self.name}-s{n}", env.now)
            n += 1
            self.result.requests.append(rec)
            self.spawn(self.session(rec))

    def session(self, rec):
        env = self.env
        h = None
        value = None
        rec.attempts = 1
        dst = 1 + int(rec.rid.rsplit("s", 1)[1]) % 2
        for i in range(3):
            rid = f"{rec.rid}/{i}"
            ev = self.expect(rid)
            self.send(dst, Request(rid, "inc", (rec.rid, 1, i == 2)), h)
            got = yield ev | env.timeout(self.timeout)
            if ev not in got:
                self.forget(rid)
                rec.aborted = True
                return
            rep = got[ev]
            rec.replied = True
            self.emit("recv", mid=rep.mid)
            if not rep.body.ok:
                rec.aborted = True
                return
            h, value = rep.header, rep.body.value
        rec.ok, rec.end = True, env.now
        self.emit("session_release", session=rec.rid, value=value)


def build(spec: ScenarioSpec, seed: int) -> RunResult:
    cfg = spec.sim_config(seed)
    cluster = Cluster(cfg)
    result = RunResult(spec, seed, cluster)
    mode = spec.mode
    if spec.name in ("chain", "recovery-chain"):
        cluster.add_object(1, WorkflowService(cluster.device(1), mode))
        for o in range(2, spec.services + 2):
            cluster.add_object(o, StepService(cluster.device(o), mode))
        clients = [cluster.add_client(ChainClient(cluster, "client0", spec, result))]
    elif spec.name in ("tpc", "recovery-tpc"):
        parts = list(range(2, spec.participants + 2))
        cluster.add_object(1, TpcCoordinator(parts, cluster.device(1), mode))
        for o in parts:
            cluster.add_object(o, TpcParticipant(cluster.device(o), mode))
        quota = [spec.requests if spec.requests is not None else 10**12]
        clients = [cluster.add_client(TpcClient(cluster, f"client{i}", spec, result, quota)) for i in range(spec.clients)]
    else:
        for o in (1, 2):
            cluster.add_object(o, SessionCounterService(cluster.device(o), mode))
        clients = [cluster.add_client(CounterClient(cluster, "client0", spec, result))]
    cluster.start()
    for c in clients:
        c.spawn(c.run())
    return result


def run(spec: ScenarioSpec, seed: int) -> RunResult:
    result = build(spec, seed)
    result.cluster.run()
    return result


def with_faults(spec: ScenarioSpec, faults) -> ScenarioSpec:
    return replace(spec, faults=tuple(faults))


__all__ = ["Fault", "InvalidSpec", "RunResult", "ScenarioSpec", "SCENARIOS", "build", "run", "with_faults"]
