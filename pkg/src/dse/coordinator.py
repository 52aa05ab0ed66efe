"""Cluster coordinator: dependency-graph view, recoverable boundaries, rollbacks.

The coordinator's only durable state is an append-only event log holding
membership changes and rollback decisions.  Everything else (the graph view,
the boundary) is rebuilt from participants after a restart, so nothing is
written to the log while the cluster runs without failures.
"""

from __future__ import annotations

import logging
import os
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional

from .core import (
    ClusterEvent,
    EventKind,
    GraphFragment,
    ObjectId,
    RollbackPlan,
    Vertex,
    decode_events,
    encode_event,
)
from .protocol import (
    BoundaryQuery,
    BoundaryUpdate,
    Connect,
    ConnectReply,
    MemberState,
    RecoveryRequest,
    RecoveryResponse,
    Report,
    RollbackAck,
    RollbackNotify,
)

log = logging.getLogger(__name__)


class StaleWorldLine(Exception):
    """Fragments from a version that a rollback already discarded."""

    def __init__(self, dropped):
        super().__init__(f"dropped {len(dropped)} stale fragment(s)")
        self.dropped = list(dropped)


class GraphConflict(Exception):
    """Two different vertices claim the same (object, version) slot."""


class LogAppendFailed(Exception):
    pass


class MemberUnresponsive(Exception):
    pass


# -- dependency graph --------------------------------------------------------


class DependencyGraph:
    """The coordinator's view: persistent vertices and their out-edges.

    Vertices that are referenced by an edge but not reported persistent are
    implicit.  ``floor[obj]`` is the version through which ``obj`` has been
    pruned; every vertex at or below it is committed.
    """

    def __init__(self):
        self.edges: dict[Vertex, frozenset] = {}
        self.lineage: dict[ObjectId, dict[int, Vertex]] = defaultdict(dict)
        self.floor: dict[ObjectId, int] = defaultdict(int)

    def __contains__(self, v: Vertex) -> bool:
        return v in self.edges

    def __len__(self) -> int:
        return len(self.edges)

    def add(self, frag: GraphFragment) -> bool:
        v = frag.vertex
        if v.version <= self.floor[v.object]:
            return False
        known = self.edges.get(v)
        if known is not None:
            if known != frag.out_edges:
                raise GraphConflict(f"{v!r} reported twice with different edges")
            return False
        other = self.lineage[v.object].get(v.version)
        if other is not None and other != v:
            raise GraphConflict(f"{v!r} conflicts with persistent {other!r}")
        self.edges[v] = frag.out_edges
        self.lineage[v.object][v.version] = v
        return True

    def remove(self, vs: Iterable[Vertex]) -> None:
        for v in vs:
            if self.edges.pop(v, None) is not None:
                del self.lineage[v.object][v.version]

    def prune_through(self, obj: ObjectId, version: int) -> None:
        if version <= self.floor[obj]:
            return
        lin = self.lineage[obj]
        for n in [n for n in lin if n <= version]:
            del self.edges[lin.pop(n)]
        self.floor[obj] = version

    def referenced(self) -> set:
        """Edge targets that are neither persistent nor committed by pruning."""
        out = set()
        for es in self.edges.values():
            for e in es:
                if e not in self.edges and e.version > self.floor[e.object]:
                    out.add(e)
        return out

    def objects(self) -> set:
        return {o for o, lin in self.lineage.items() if lin} | {o for o, f in self.floor.items() if f}


def compute_closure(graph: DependencyGraph, exclude: frozenset = frozenset()) -> set:
    """Largest set of persistent vertices with no edge leaving it.

    Besides explicit edges, every vertex depends on its predecessor version
    of the same object.  Vertices in ``exclude`` are treated as gone.
    Works by fixed-point elimination: seed with every vertex that has an
    unsatisfied dependency, then propagate removal backwards along edges.
    """
    alive = graph.edges.keys() - exclude if exclude else set(graph.edges)
    floor = graph.floor
    lineage = graph.lineage

    def satisfied(e: Vertex) -> bool:
        return e in alive or (e.version <= floor[e.object] and e not in exclude)

    rev: dict[Vertex, list] = defaultdict(list)
    work = deque()
    for v in alive:
        ok = True
        if v.version - 1 > floor[v.object]:
            p = lineage[v.object].get(v.version - 1)
            if p is None or p not in alive:
                ok = False
        for e in graph.edges[v]:
            if e in alive:
                rev[e].append(v)
            elif not satisfied(e):
                ok = False
        if not ok:
            work.append(v)
    removed = set()
    while work:
        v = work.popleft()
        if v in removed:
            continue
        removed.add(v)
        work.extend(u for u in rev.get(v, ()) if u not in removed)
        s = lineage[v.object].get(v.version + 1)
        if s is not None and s in alive and s not in removed:
            work.append(s)
    return alive - removed


@dataclass(frozen=True)
class RecoverableBoundary:
    cutoffs: Mapping[ObjectId, Vertex] = field(default_factory=dict)
    epoch: int = 0
    vertices: frozenset = frozenset()

    def contains(self, v: Vertex) -> bool:
        c = self.cutoffs.get(v.object)
        return c is not None and v.version <= c.version


def compute_boundary(graph: DependencyGraph, previous: Optional[RecoverableBoundary] = None) -> RecoverableBoundary:
    """Maximal closure of the current view, never below ``previous``."""
    members = compute_closure(graph)
    cut: dict[ObjectId, Vertex] = {}
    for v in members:
        c = cut.get(v.object)
        if c is None or v.version > c.version:
            cut[v.object] = v
    epoch = 0
    if previous is not None:
        for o, pv in previous.cutoffs.items():
            c = cut.get(o)
            if c is None or pv.version > c.version:
                cut[o] = pv
        epoch = previous.epoch + (cut != dict(previous.cutoffs))
    return RecoverableBoundary(cut, epoch, frozenset(members))


def compute_rollback(graph: DependencyGraph, obj: ObjectId, surviving: Iterable[Vertex]):
    """Survivors and lost vertices after ``obj`` comes back with ``surviving``.

    Everything of ``obj`` that it did not report as surviving is dropped;
    then any vertex left with a dependency outside the survivors is dropped
    too, until no dangling edge remains.  Unpersisted vertices of other
    objects are never survivors, so dependants of in-memory state are rolled
    back as well.
    """
    surviving = set(surviving)
    direct = frozenset(v for v in graph.edges if v.object == obj and v not in surviving)
    survivors = compute_closure(graph, direct)
    lost = set(graph.edges.keys() - survivors)
    lost.update(e for e in graph.referenced() if e.object == obj and e not in surviving)
    return survivors, frozenset(lost)


# -- persistent event log ----------------------------------------------------


class EventLog:
    """Append-only log of :class:`ClusterEvent` records."""

    def append(self, events: list, on_durable: Callable[[], None]) -> None:
        raise NotImplementedError

    def replay(self) -> list:
        raise NotImplementedError

    def __len__(self) -> int:
        return len(self.replay())


class MemoryLog(EventLog):
    """In-memory log.  With ``schedule`` set, appends become durable later.

    ``schedule(delay, fn)`` must run ``fn`` after ``delay``; ``latency()``
    samples the delay.  :meth:`crash` discards appends still in flight.
    """

    def __init__(self, schedule=None, latency=None):
        self.data = bytearray()
        self.schedule = schedule
        self.latency = latency or (lambda: 0.0)
        self.appends = 0
        self._gen = 0

    def append(self, events, on_durable):
        blob = b"".join(encode_event(e) for e in events)
        if self.schedule is None:
            self.data += blob
            self.appends += len(events)
            on_durable()
            return
        gen = self._gen

        def done():
            if gen != self._gen:
                return
            self.data += blob
            self.appends += len(events)
            on_durable()

        self.schedule(self.latency(), done)

    def crash(self) -> None:
        self._gen += 1

    def replay(self):
        events, _ = decode_events(self.data)
        return events

    def __len__(self):
        return len(self.replay())


class FileLog(EventLog):
    """Log file with one fsync per append batch.  A torn tail is ignored on replay."""

    def __init__(self, path):
        self.path = os.fspath(path)
        events, good = self._read()
        size = os.path.getsize(self.path) if os.path.exists(self.path) else 0
        if good < size:
            with open(self.path, "r+b") as f:
                f.truncate(good)
        self.appends = 0

    def _read(self):
        if not os.path.exists(self.path):
            return [], 0
        with open(self.path, "rb") as f:
            return decode_events(f.read())

    def append(self, events, on_durable):
        blob = b"".join(encode_event(e) for e in events)
        try:
            with open(self.path, "ab") as f:
                f.write(blob)
                f.flush()
                os.fsync(f.fileno())
        except OSError as e:
            raise LogAppendFailed(str(e)) from e
        self.appends += len(events)
        on_durable()

    def replay(self):
        return self._read()[0]


# -- coordinator -------------------------------------------------------------


def _noop(*a, **k):
    pass


class Coordinator:
    """Serial, log-backed coordinator.

    ``send(dst, msg)`` delivers a protocol message to member ``dst``.  All
    inputs go through :meth:`submit`, which processes one message at a time;
    while a rollback decision is waiting for its log append, later messages
    queue up behind it.
    """

    def __init__(self, log_: EventLog, send: Callable, *, trace: Callable = _noop, incarnation: int = 0):
        self.log = log_
        self.send = send
        self.trace = trace
        self.incarnation = incarnation
        self.graph = DependencyGraph()
        self.members: set = set()
        self.plans: list[RollbackPlan] = []
        self.anchors: dict[tuple, int] = {}
        self.acked: dict[ObjectId, int] = {}
        self.boundary = RecoverableBoundary()
        self.next_event_seq = 0
        self.recovering = False
        self.awaiting: set = set()
        self.stale_dropped = 0
        self._subscribers: dict[ObjectId, int] = {}
        self._broadcast_epoch = 0
        self._queue: deque = deque()
        self._deferred: list = []
        self._busy = False
        self._started = False

    @property
    def seq(self) -> int:
        return len(self.plans)

    # life cycle

    def start(self) -> None:
        """Replay the log; if it holds anything, enter recovery."""
        events = self.log.replay()
        for e in events:
            self._apply_event(e)
        self._started = True
        if events:
            self.recover_coordinator(events, replayed=True)

    def _apply_event(self, e: ClusterEvent) -> None:
        self.next_event_seq = e.sequence + 1
        if e.kind in (EventKind.MEMBER_JOIN, EventKind.MEMBER_REJOIN):
            self.members.add(e.payload)
        else:
            plan = e.payload
            assert plan.failure_seq == self.seq + 1, "log holds non-consecutive decisions"
            self.plans.append(plan)

    def recover_coordinator(self, events=None, replayed=False) -> None:
        """Rebuild from the log and ask every member for its graph segments.

        Boundary queries are held until every member has answered.
        """
        if not replayed:
            for e in events or self.log.replay():
                self._apply_event(e)
        self.recovering = True
        self.awaiting = set(self.members)
        self.trace("coord_recover_start", members=sorted(self.members), seq=self.seq)
        for m in sorted(self.members):
            self.send(m, RecoveryRequest(self.incarnation))
        if not self.awaiting:
            self._finish_recovery()

    def unresponsive(self) -> set:
        return set(self.awaiting) if self.recovering else set()

    # input

    def submit(self, msg) -> None:
        self._queue.append(msg)
        self._pump()

    def _pump(self) -> None:
        while self._queue and not self._busy:
            self._handle(self._queue.popleft())

    def _handle(self, msg) -> None:
        if isinstance(msg, Report):
            try:
                self.report_persistence(msg.obj, msg.fragments)
            except StaleWorldLine as e:
                self.stale_dropped += len(e.dropped)
                self.trace("stale_fragments", member=msg.obj, dropped=[list(f.vertex) for f in e.dropped])
            self._refresh_boundary()
        elif isinstance(msg, RollbackAck):
            self._on_ack(msg)
        elif isinstance(msg, BoundaryQuery):
            self._on_query(msg)
        elif isinstance(msg, Connect):
            self._on_connect(msg.state)
        elif isinstance(msg, RecoveryResponse):
            self._on_recovery_response(msg.state)
        else:
            raise TypeError(f"coordinator cannot handle {msg!r}")

    def tick(self) -> None:
        """Periodic work: recompute and broadcast the boundary if it moved."""
        if self.recovering or self._busy:
            return
        self._refresh_boundary()
        if self.boundary.epoch > self._broadcast_epoch:
            self._broadcast_epoch = self.boundary.epoch
            upd = self._update_msg()
            for m in sorted(self.members):
                self.send(m, upd)

    # graph maintenance

    def _anchor(self, obj: ObjectId, k: int) -> int:
        a = self.anchors.get((obj, k))
        return self.plans[k - 1].target_version(obj) if a is None else a

    def is_valid(self, v: Vertex) -> bool:
        """Whether ``v`` is still on its object's lineage given all decisions."""
        if v.world_line > self.seq:
            return False
        return all(v.version <= self._anchor(v.object, k) for k in range(v.world_line + 1, self.seq + 1))

    def report_persistence(self, obj: ObjectId, fragments: Iterable[GraphFragment]) -> None:
        dropped = []
        for f in fragments:
            if f.vertex.object != obj:
                raise ValueError(f"{obj} reported a fragment for {f.vertex!r}")
            if self.is_valid(f.vertex):
                self.graph.add(f)
            else:
                dropped.append(f)
        if dropped:
            raise StaleWorldLine(dropped)

    def _ingest(self, obj: ObjectId, fragments) -> None:
        try:
            self.report_persistence(obj, fragments)
        except StaleWorldLine as e:
            self.stale_dropped += len(e.dropped)

    def compute_boundary(self) -> RecoverableBoundary:
        return compute_boundary(self.graph, self.boundary)

    def prune(self, boundary: RecoverableBoundary) -> dict:
        """Drop vertices below each cutoff from the view, keeping the cutoff itself.

        Returns the per-object advice: the version each member may prune through.
        """
        advice = {}
        for o, c in boundary.cutoffs.items():
            if c.version > 1:
                self.graph.prune_through(o, c.version - 1)
                advice[o] = c.version - 1
        return advice

    def _refresh_boundary(self) -> None:
        if self.recovering:
            return
        b = self.compute_boundary()
        if b.epoch != self.boundary.epoch:
            self.boundary = b
            self.prune(b)
            self.trace("boundary", epoch=b.epoch, cutoffs=sorted(list(v) for v in b.cutoffs.values()))
            self._notify_subscribers()

    def _update_msg(self) -> BoundaryUpdate:
        return BoundaryUpdate(self.boundary.epoch, tuple(sorted(self.boundary.cutoffs.values())))

    def _notify_subscribers(self) -> None:
        if not self._subscribers:
            return
        upd = self._update_msg()
        for o in [o for o, e in self._subscribers.items() if e < self.boundary.epoch]:
            del self._subscribers[o]
            self.send(o, upd)

    def _on_query(self, q: BoundaryQuery) -> None:
        if not self.recovering and self.boundary.epoch > q.epoch:
            self.send(q.obj, self._update_msg())
        else:
            self._subscribers[q.obj] = q.epoch

    def _on_ack(self, a: RollbackAck) -> None:
        if a.seq > self.seq:
            return
        key = (a.obj, a.seq)
        self.anchors[key] = max(self._anchor(a.obj, a.seq), a.retained)
        self.acked[a.obj] = max(self.acked.get(a.obj, 0), a.seq)
        self._ingest(a.obj, a.fragments)
        self._refresh_boundary()

    # membership and rollback

    def _append(self, events: list, then: Callable[[], None]) -> None:
        self._busy = True

        def durable():
            self._busy = False
            then()
            self._pump()

        self.log.append(events, durable)

    def _event(self, kind: EventKind, payload) -> ClusterEvent:
        e = ClusterEvent(kind, payload, self.next_event_seq)
        self.next_event_seq += 1
        return e

    def _on_connect(self, st: MemberState) -> None:
        if self.recovering:
            self._on_recovery_response(st)
            self._deferred.append(st)
            return
        obj = st.obj
        if obj not in self.members:
            self.trace("member_join", member=obj)

            def joined():
                self.members.add(obj)
                self._ingest(obj, st.fragments)
                self._reply_connect(st)

            self._append([self._event(EventKind.MEMBER_JOIN, obj)], joined)
            return
        self._ingest_anchors(st)
        self._ingest(obj, st.fragments)
        self.plan_rollback(obj, [f.vertex for f in st.fragments], on_released=lambda p: self._reply_connect(st))

    def _reply_connect(self, st: MemberState) -> None:
        plans = tuple(p for p in self.plans if p.failure_seq > st.applied_seq)
        self.send(st.obj, ConnectReply(st.obj, plans, self.incarnation))
        if not self.recovering and self.boundary.epoch:
            self.send(st.obj, self._update_msg())

    def plan_rollback(self, obj: ObjectId, surviving_versions, on_released=None) -> RollbackPlan:
        """Decide a rollback after ``obj`` restarted with ``surviving_versions``.

        The decision is appended to the log; only once that append is
        durable does it touch the view and go out to the members.  With a
        synchronous log that happens before this method returns.
        """
        survivors, lost = compute_rollback(self.graph, obj, surviving_versions)
        removed_objs = {v.object for v in lost if v in self.graph}
        targets = {}
        for m in sorted(self.members | {obj}):
            best = None
            for v in survivors:
                if v.object == m and (best is None or v.version > best.version):
                    best = v
            if best is None:
                best = self.boundary.cutoffs.get(m, Vertex(m, 0, 0))
            targets[m] = best
        skippable = frozenset(m for m in self.members if m != obj and m not in removed_objs)
        plan = RollbackPlan(self.seq + 1, targets, lost, skippable)
        for m, t in targets.items():
            c = self.boundary.cutoffs.get(m)
            assert c is None or t.version >= c.version, f"plan would roll {m} back past its committed cutoff"
        self.trace(
            "plan",
            seq=plan.failure_seq,
            member=obj,
            targets=sorted(list(t) for t in targets.values()),
            lost=sorted(list(v) for v in lost),
            skippable=sorted(skippable),
        )

        def release():
            self.plans.append(plan)
            self.graph.remove(self.graph.edges.keys() - survivors)
            for m in self.members:
                self.send_plan(m, plan) if m != obj else None
            if on_released is not None:
                on_released(plan)

        self._append([self._event(EventKind.MEMBER_REJOIN, obj), self._event(EventKind.ROLLBACK_DECISION, plan)], release)
        return plan

    def send_plan(self, m: ObjectId, plan: RollbackPlan) -> None:
        self.send(m, RollbackNotify(plan))

    # recovery

    def _ingest_anchors(self, st: MemberState) -> None:
        for seq, kept in st.anchors:
            if 0 < seq <= self.seq:
                key = (st.obj, seq)
                self.anchors[key] = max(self._anchor(st.obj, seq), kept)

    def _on_recovery_response(self, st: MemberState) -> None:
        if not self.recovering:
            return
        self._ingest_anchors(st)
        self._ingest(st.obj, st.fragments)
        if st.floor:
            self.graph.prune_through(st.obj, st.floor)
        cut = dict(self.boundary.cutoffs)
        for v in st.known_boundary:
            c = cut.get(v.object)
            if c is None or v.version > c.version:
                cut[v.object] = v
        epoch = max(self.boundary.epoch, st.boundary_epoch)
        self.boundary = RecoverableBoundary(cut, epoch, self.boundary.vertices)
        for p in self.plans:
            if p.failure_seq > st.applied_seq:
                self.send_plan(st.obj, p)
        self.awaiting.discard(st.obj)
        if not self.awaiting:
            self._finish_recovery()

    def _finish_recovery(self) -> None:
        self.recovering = False
        # a restarted coordinator must not reuse epochs members already saw
        self.boundary = RecoverableBoundary(self.boundary.cutoffs, self.boundary.epoch + 1, self.boundary.vertices)
        self._refresh_boundary()
        self.trace("coord_recover_done", epoch=self.boundary.epoch, cutoffs=sorted(list(v) for v in self.boundary.cutoffs.values()))
        upd = self._update_msg()
        self._broadcast_epoch = self.boundary.epoch
        for m in sorted(self.members):
            self.send(m, upd)
        self._subscribers.clear()
        deferred, self._deferred = self._deferred, []
        for st in deferred:
            self._queue.append(Connect(st))
