"""Per-object speculative execution runtime.

A :class:`Runtime` wraps one user :class:`StateObjectBackend`.  Actions run
under the shared side of a biased shared/exclusive latch; persist, restore,
prune and rollback application take the exclusive side and are queued until
no action is active.

Every blocking operation has a non-blocking ``try_*`` twin that returns an
:class:`Admission` code.  The simulator drives those and waits on
:meth:`Runtime.add_listener` notifications; threaded hosts use the blocking
forms, which wait on a condition variable.
"""

from __future__ import annotations

import enum
import logging
import struct
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from .core import (
    GraphFragment,
    Header,
    MalformedRecord,
    ObjectId,
    RollbackPlan,
    Vertex,
    decode_fragment,
    encode_fragment,
    merge_deps,
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


class NotConnected(Exception):
    pass


class DuplicateConnect(Exception):
    pass


class NoActiveAction(Exception):
    pass


class RolledBack(Exception):
    """The sthread observed state that a rollback discarded."""


class OutOfOrderRollback(Exception):
    pass


class CoordinatorUnreachable(Exception):
    pass


class Admission(enum.Enum):
    ENTERED = "entered"
    DISCARD = "discard"
    WAIT = "wait"
    REFUSED = "refused"


class StateObjectBackend(ABC):
    """User state with versioned persistence.

    ``restore(v)`` must also forget every version above ``v``; ``restore(0)``
    resets to the initial empty state.
    """

    @abstractmethod
    def persist(self, version: int, metadata: bytes, done: Callable[[], None]) -> None: ...

    @abstractmethod
    def restore(self, version: int) -> bytes: ...

    @abstractmethod
    def prune(self, version: int) -> None: ...

    @abstractmethod
    def list_versions(self) -> list: ...


@dataclass(frozen=True)
class RuntimeConfig:
    object: ObjectId
    commit_period: float = 10.0
    coordinator: Any = None
    buffer_capacity: int = 1024

    def __post_init__(self):
        if not self.commit_period > 0:
            raise ValueError("commit_period must be positive")
        if self.buffer_capacity < 0:
            raise ValueError("buffer_capacity must be non-negative")


# metadata = fragment | u32 n | n x (u64 seq, u64 retained version)
_ANCHOR = struct.Struct("<QQ")


def encode_meta(frag: GraphFragment, anchors: dict) -> bytes:
    items = sorted(anchors.items())
    return encode_fragment(frag) + struct.pack("<I", len(items)) + b"".join(_ANCHOR.pack(k, v) for k, v in items)


def decode_meta(b: bytes) -> tuple:
    b = bytes(b)
    if len(b) < 4:
        raise MalformedRecord("metadata too short")
    (n,) = struct.unpack_from("<I", b, 0)
    end = 4 + n
    frag = decode_fragment(b[:end])
    if len(b) < end + 4:
        raise MalformedRecord("metadata missing anchor count")
    (na,) = struct.unpack_from("<I", b, end)
    off = end + 4
    if len(b) != off + 16 * na:
        raise MalformedRecord("anchor list length mismatch")
    anchors = dict(_ANCHOR.unpack_from(b, off + 16 * i) for i in range(na))
    return frag, anchors


@dataclass
class SThread:
    parent: ObjectId
    deps: frozenset
    world_line: int
    rolled_back: bool = False
    created_at: int = 0
    tag: Any = field(default=None, compare=False)


def _noop(*a, **k):
    pass


class Runtime:
    def __init__(self, config: RuntimeConfig, backend: StateObjectBackend, link, clock: Callable[[], float], trace: Callable = _noop):
        self.config = config
        self.obj = config.object
        self.backend = backend
        self.link = link
        self.clock = clock
        self.trace = trace
        self.listeners: list = []

        self.wl = 0
        self.version = 1
        self.applied_seq = 0
        self.floor = 0
        self._edges: set = set()
        self._dirty = False
        self._hdr: Optional[Header] = None
        self._plans: dict = {}
        self._anchors: dict = {}
        self._inflight: dict = {}
        self._durable: dict = {}
        self.boundary: dict = {}
        self.boundary_epoch = 0
        self._query_out = False
        self.barrier_waiters = 0
        self.delayed = 0
        self._next_commit = 0.0
        self._connect_sent = False
        self.connected = False
        self.dead = False

        self._mu = threading.RLock()
        self._cv = threading.Condition(self._mu)
        self._tls = threading.local()
        self._slots: list = []
        self._xflag = False
        self._xq: list = []
        self._apply_queued = False
        self.exclusive_runs = 0
        self.gen = 0
        self._advance_to = 0
        self._draining = False

    # -- shared / exclusive latch ------------------------------------------

    def _slot(self) -> list:
        try:
            return self._tls.s
        except AttributeError:
            s = [0]
            with self._mu:
                self._slots.append(s)
            self._tls.s = s
            return s

    def active(self) -> int:
        return sum(s[0] for s in self._slots)

    def _exclusive(self, op: Callable[[], bool]) -> None:
        """Queue ``op``; it runs once no action holds the shared side.

        ``op`` returns False to stay at the head of the queue and be retried
        on the next state change.
        """
        with self._mu:
            self._xq.append(op)
            self._xflag = True
        self._drain()

    def _drain(self) -> None:
        with self._mu:
            if self._draining:
                return
            self._draining = True
            ran = False
            try:
                while self._xq and self.active() == 0:
                    op = self._xq[0]
                    self.exclusive_runs += 1
                    if op() is False:
                        break
                    self._xq.pop(0)
                    ran = True
            finally:
                self._draining = False
            if not self._xq:
                self._xflag = False
            if ran:
                self._changed()

    def _changed(self) -> None:
        self.gen += 1
        with self._cv:
            self._cv.notify_all()
        for fn in list(self.listeners):
            fn()

    def add_listener(self, fn: Callable[[], None]) -> None:
        self.listeners.append(fn)

    def remove_listener(self, fn) -> None:
        try:
            self.listeners.remove(fn)
        except ValueError:
            pass

    def _wait(self, check: Callable[[], Any], timeout: Optional[float]):
        """Block until ``check()`` is not None; return it."""
        with self._cv:
            while True:
                r = check()
                if r is not None:
                    return r
                if not self._cv.wait(timeout):
                    raise TimeoutError("runtime wait timed out")

    # -- connection ----------------------------------------------------------

    def _load_durable(self) -> None:
        versions = sorted(self.backend.list_versions(), key=lambda p: p[0])
        self._durable = {}
        top_anchors: dict = {}
        for v, meta in versions:
            frag, anchors = decode_meta(meta)
            self._durable[v] = frag
            top_anchors = anchors
        if versions:
            maxv = versions[-1][0]
            self.backend.restore(maxv)
            top = self._durable[maxv].vertex
            self._anchors = dict(top_anchors)
            self.wl = max([top.world_line] + list(top_anchors))
            self.version = maxv + 1
            self.floor = versions[0][0] - 1
        self.applied_seq = self.wl

    def begin_connect(self) -> None:
        """Start registering with the coordinator; completes on :class:`ConnectReply`."""
        with self._mu:
            if self._connect_sent:
                raise DuplicateConnect(f"object {self.obj} already connected in this incarnation")
            self._connect_sent = True
            self._load_durable()
            self._next_commit = self._tick_after(self.clock())
            self.trace("connect", vertex=list(self.vertex), durable=sorted(self._durable))
            self.link.send(Connect(self.member_state()))

    def connect(self, timeout: Optional[float] = 10.0) -> None:
        self.begin_connect()
        try:
            self._wait(lambda: True if self.connected else None, timeout)
        except TimeoutError:
            raise CoordinatorUnreachable(f"no reply from coordinator within {timeout}s") from None

    def member_state(self) -> MemberState:
        with self._mu:
            return MemberState(
                obj=self.obj,
                world_line=self.wl,
                applied_seq=self.applied_seq,
                fragments=tuple(self._durable[v] for v in sorted(self._durable)),
                floor=self.floor,
                anchors=tuple(sorted(self._anchors.items())),
                known_boundary=tuple(sorted(self.boundary.values())),
                boundary_epoch=self.boundary_epoch,
            )

    @property
    def vertex(self) -> Vertex:
        return Vertex(self.obj, self.wl, self.version)

    # -- inbound coordinator traffic -------------------------------------------

    def deliver(self, msg) -> None:
        if self.dead:
            return
        with self._mu:
            if isinstance(msg, ConnectReply):
                plans = sorted(msg.plans, key=lambda p: p.failure_seq)
                if not self.connected:
                    # the last plan already accounts for everything before it
                    for p in plans[:-1]:
                        if p.failure_seq == self.applied_seq + 1:
                            self._catch_up(p, plans[-1])
                for p in plans:
                    self._plans.setdefault(p.failure_seq, p)
                if not self.connected:
                    self.connected = True
                    self.trace("connected", vertex=list(self.vertex), plans=[p.failure_seq for p in msg.plans])
                self._schedule_plans()
            elif isinstance(msg, RollbackNotify):
                self._plans.setdefault(msg.plan.failure_seq, msg.plan)
                self._schedule_plans()
            elif isinstance(msg, BoundaryUpdate):
                self._on_boundary(msg)
            elif isinstance(msg, RecoveryRequest):
                self._query_out = False
                if self.connected:
                    self.link.send(RecoveryResponse(self.member_state()))
                else:
                    self.link.send(Connect(self.member_state()))
            else:
                raise TypeError(f"runtime cannot handle {msg!r}")
            self._changed()

    def _on_boundary(self, upd: BoundaryUpdate) -> None:
        self._query_out = False
        moved = False
        for v in upd.cutoffs:
            c = self.boundary.get(v.object)
            if c is None or v.version > c.version:
                self.boundary[v.object] = v
                moved = True
        self.boundary_epoch = max(self.boundary_epoch, upd.epoch)
        if moved:
            self.trace("boundary_seen", epoch=upd.epoch)
        mine = self.boundary.get(self.obj)
        if mine is not None and mine.version - 1 > self.floor:
            self._exclusive(lambda n=mine.version - 1: self._op_prune(n))
        if self.barrier_waiters:
            self._ask_boundary()

    def _ask_boundary(self) -> None:
        if not self._query_out and self.connected:
            self._query_out = True
            self.link.send(BoundaryQuery(self.obj, self.boundary_epoch))

    # -- periodic work -----------------------------------------------------------

    def _tick_after(self, now: float) -> float:
        c = self.config.commit_period
        return (int((now + 1e-9) // c) + 1) * c

    def refresh(self) -> None:
        """Group commit when due, keep a boundary query outstanding for waiting barriers."""
        if not self.connected or self.dead:
            return
        now = self.clock()
        if now + 1e-9 >= self._next_commit:
            self._next_commit = self._tick_after(now)
            if self._dirty:
                self._exclusive(self._op_persist_if_dirty)
        with self._mu:
            if self.barrier_waiters:
                self._ask_boundary()
        if self._xq:
            self._drain()

    def _op_persist_if_dirty(self) -> bool:
        if self._dirty:
            self._op_persist()
        return True

    def _op_persist(self) -> bool:
        v = self.version
        frag = GraphFragment(Vertex(self.obj, self.wl, v), merge_deps(self._edges, ()))
        self._edges = set()
        self._dirty = False
        self.version = v + 1
        self._hdr = None
        self._inflight[v] = frag
        meta = encode_meta(frag, self._anchors)
        self.trace("persist", vertex=list(frag.vertex), edges=sorted(list(e) for e in frag.out_edges))
        self.backend.persist(v, meta, lambda: self._persisted(v, frag))
        return True

    def _persisted(self, v: int, frag: GraphFragment) -> None:
        if self.dead:
            return
        with self._mu:
            if self._inflight.pop(v, None) is None:
                return
            self._durable[v] = frag
            self.trace("persisted", vertex=list(frag.vertex))
            if self.connected:
                self.link.send(Report(self.obj, (frag,)))
        self._drain()
        self._changed()

    def force_persist(self) -> None:
        self._exclusive(self._op_persist)

    def _op_advance(self, n: int) -> bool:
        while self.version < n:
            self._op_persist()
        return True

    def _op_prune(self, n: int) -> bool:
        if n > self.floor:
            self.backend.prune(n)
            for v in [v for v in self._durable if v <= n]:
                del self._durable[v]
            self.floor = n
        return True

    # -- rollback --------------------------------------------------------------

    def _schedule_plans(self) -> None:
        if self.connected and not self._apply_queued and self.applied_seq + 1 in self._plans:
            self._apply_queued = True
            self._exclusive(self._op_apply_next)

    def _op_apply_next(self) -> bool:
        plan = self._plans.get(self.applied_seq + 1)
        if plan is None:
            self._apply_queued = False
            return True
        if not self._apply(plan):
            return False
        self._apply_queued = False
        self._schedule_plans()
        return True

    def apply_rollback(self, plan: RollbackPlan) -> None:
        """Apply ``plan`` now; it must be the next plan in sequence."""
        with self._mu:
            if plan.failure_seq <= self.applied_seq:
                return
            if plan.failure_seq != self.applied_seq + 1:
                raise OutOfOrderRollback(f"plan {plan.failure_seq} but only {self.applied_seq} applied")
            self._plans.setdefault(plan.failure_seq, plan)
            self._schedule_plans()

    def can_skip(self, plan: RollbackPlan) -> bool:
        """Whether every unreported dependency of ours survives ``plan``."""
        if self.obj not in plan.skippable:
            return False
        tv = plan.target_version(self.obj)
        pending = [f for v, f in self._durable.items() if v > tv] + [f for v, f in self._inflight.items() if v > tv]
        edges = set(self._edges)
        for f in pending:
            edges |= f.out_edges
        return all(e.object == self.obj or e.version <= plan.target_version(e.object) for e in edges)

    def _catch_up(self, plan: RollbackPlan, final: RollbackPlan) -> None:
        seq = plan.failure_seq
        tv = plan.target_version(self.obj)
        old = self.vertex
        # an anchor lost in the crash: whatever the final plan keeps of the
        # restored state survived this one too
        kept = max(tv, min(final.target_version(self.obj), self.version - 1))
        self._anchors.setdefault(seq, kept)
        self.wl = seq
        self.applied_seq = seq
        self._hdr = None
        self.trace("rollback", seq=seq, skip=False, catchup=True, target=tv, kept=self._anchors[seq], old=list(old), new=list(self.vertex))

    def _apply(self, plan: RollbackPlan) -> bool:
        seq = plan.failure_seq
        if seq != self.applied_seq + 1:
            raise OutOfOrderRollback(f"plan {seq} but only {self.applied_seq} applied")
        tv = plan.target_version(self.obj)
        old = self.vertex
        if self.can_skip(plan):
            kept = self.version - 1
            resend = tuple(f for v, f in sorted(self._durable.items()) if v > tv)
            self._anchors[seq] = kept
            self.wl = seq
            self.applied_seq = seq
            self._hdr = None
            self.trace("rollback", seq=seq, skip=True, target=tv, kept=kept, old=list(old), new=list(self.vertex))
            self.link.send(RollbackAck(self.obj, seq, kept, resend))
            return True
        if self._inflight:
            return False
        self.backend.restore(tv)
        for v in [v for v in self._durable if v > tv]:
            del self._durable[v]
        self._anchors[seq] = tv
        self.wl = seq
        self.applied_seq = seq
        self.version = tv + 1
        self._edges = set()
        self._dirty = False
        self._hdr = None
        self.trace("rollback", seq=seq, skip=False, target=tv, kept=tv, old=list(old), new=list(self.vertex))
        self.link.send(RollbackAck(self.obj, seq, tv, ()))
        return True

    # -- dependency status -----------------------------------------------------

    def known_seq(self) -> int:
        return max(self._plans, default=0)

    def is_lost(self, d: Vertex) -> bool:
        for k in range(d.world_line + 1, self.known_seq() + 1):
            plan = self._plans.get(k)
            if plan is None:
                continue
            a = self._anchors.get(k) if d.object == self.obj else None
            if a is None:
                a = plan.target_version(d.object)
            if d.version > a:
                return True
        return False

    def is_committed(self, d: Vertex) -> bool:
        c = self.boundary.get(d.object)
        return c is not None and d.version <= c.version and not self.is_lost(d)

    # -- actions -----------------------------------------------------------------

    def try_start_action(self, h: Optional[Header] = None, delayed: bool = False) -> Admission:
        """One admission attempt for a message carrying ``h``.

        ``delayed`` marks a caller that already holds a slot in the
        future-world-line buffer.
        """
        if not self.connected:
            raise NotConnected(f"object {self.obj} is not connected")
        s = self._slot()
        s[0] += 1
        if self._xflag:
            s[0] -= 1
            self._drain()
            return Admission.WAIT
        if h is None:
            self._dirty = True
            return Admission.ENTERED
        self._advance_to = 0
        verdict = self._admit(h, delayed)
        if verdict is not Admission.ENTERED:
            s[0] -= 1
            if self._advance_to:
                self._exclusive(lambda n=self._advance_to: self._op_advance(n))
            elif self._xflag:
                self._drain()
            return verdict
        return Admission.ENTERED

    def _admit(self, h: Header, delayed: bool) -> Admission:
        # caller holds the shared side
        if h.world_line < self.wl:
            return Admission.DISCARD
        if h.world_line > self.wl:
            if not delayed and self.delayed >= self.config.buffer_capacity:
                return Admission.REFUSED
            return Admission.WAIT
        need = max((d.version for d in h.deps if d.object != self.obj), default=0)
        if need > self.version:
            self._advance_to = max(self._advance_to, need)
            return Admission.WAIT
        deps = [d for d in h.deps if d.object != self.obj]
        self._edges.update(deps)
        self._dirty = True
        return Admission.ENTERED

    def start_action(self, h: Optional[Header] = None, timeout: Optional[float] = None) -> bool:
        """Blocking entry; False means the message came from rolled-back state."""
        if h is None:
            s = self._slot()
            s[0] += 1
            if not self._xflag:
                self._dirty = True
                return True
            s[0] -= 1
            self._drain()
        return self._blocking(lambda d: self.try_start_action(h, d), h, timeout)

    def _blocking(self, attempt, h, timeout) -> bool:
        delayed = False
        try:
            while True:
                g = self.gen
                r = attempt(delayed)
                if r is Admission.ENTERED:
                    return True
                if r is Admission.DISCARD:
                    return False
                if r is Admission.REFUSED:
                    raise BufferError("delayed-message buffer is full")
                if h is not None and h.world_line > self.wl and not delayed:
                    with self._mu:
                        self.delayed += 1
                    delayed = True
                self._wait(lambda: True if self.gen != g else None, timeout)
        finally:
            if delayed:
                with self._mu:
                    self.delayed -= 1

    def end_action(self) -> Header:
        s = self._slot()
        if s[0] <= 0:
            raise NoActiveAction("end_action outside an action")
        h = self._hdr
        if h is None or h.world_line != self.wl:
            h = self._hdr = Header(self.wl, frozenset((Vertex(self.obj, self.wl, self.version),)))
        s[0] -= 1
        if self._xflag:
            self._drain()
        return h

    def current_header(self) -> Header:
        return Header(self.wl, frozenset((self.vertex,)))

    def detach(self) -> SThread:
        s = self._slot()
        if s[0] <= 0:
            raise NoActiveAction("detach outside an action")
        t = SThread(self.obj, frozenset((self.vertex,)), self.wl, created_at=self.applied_seq)
        s[0] -= 1
        if self._xflag:
            self._drain()
        return t

    # -- sthreads ------------------------------------------------------------------

    def _validate(self, t: SThread) -> bool:
        """Lazily bring ``t`` up to the newest known plan; False if it was invalidated."""
        if t.rolled_back:
            return False
        top = self.known_seq()
        if t.world_line < top:
            if any(self.is_lost(d) for d in t.deps):
                t.rolled_back = True
                self.trace("sthread_rolled_back", world_line=t.world_line, deps=sorted(list(d) for d in t.deps))
                return False
            t.world_line = top
        return True

    def try_merge(self, t: SThread, delayed: bool = False) -> Admission:
        if t.parent != self.obj:
            raise ValueError(f"sthread belongs to {t.parent}, not {self.obj}")
        with self._mu:
            if not self._validate(t):
                return Admission.DISCARD
        return self.try_start_action(Header(t.world_line, t.deps), delayed)

    def merge(self, t: SThread, timeout: Optional[float] = None) -> bool:
        if not self.connected:
            raise NotConnected(f"object {self.obj} is not connected")
        return self._blocking(lambda d: self.try_merge(t, d), Header(t.world_line, t.deps), timeout)

    def try_sthread_receive(self, t: SThread, h: Header) -> Admission:
        with self._mu:
            if not self._validate(t):
                raise RolledBack("sthread was rolled back")
            if h.world_line < t.world_line:
                return Admission.DISCARD
            if h.world_line > t.world_line:
                if self.known_seq() < h.world_line:
                    return Admission.WAIT
                if not self._validate(t):
                    raise RolledBack("sthread was rolled back")
            t.deps = merge_deps(t.deps, h.deps)
            t.world_line = max(t.world_line, h.world_line)
            return Admission.ENTERED

    def sthread_receive(self, t: SThread, h: Header, timeout: Optional[float] = None) -> bool:
        def check():
            r = self.try_sthread_receive(t, h)
            return None if r is Admission.WAIT else r is Admission.ENTERED

        return self._wait(check, timeout)

    def sthread_send(self, t: SThread) -> Header:
        with self._mu:
            if not self._validate(t):
                raise RolledBack("sthread was rolled back")
            return Header(t.world_line, t.deps)

    def try_barrier(self, t: SThread) -> Optional[frozenset]:
        """Released deps if every one is committed, None to keep waiting.

        Raises :class:`RolledBack` once any dependency is known lost.
        """
        with self._mu:
            if not self._validate(t):
                raise RolledBack("sthread was rolled back")
            if any(self.is_lost(d) for d in t.deps):
                t.rolled_back = True
                raise RolledBack("barrier dependency was rolled back")
            if all(self.is_committed(d) for d in t.deps):
                released = t.deps
                t.deps = frozenset()
                self.trace("barrier", deps=sorted(list(d) for d in released))
                return released
            self._ask_boundary()
            return None

    def barrier(self, t: SThread, timeout: Optional[float] = None) -> frozenset:
        with self._mu:
            self.barrier_waiters += 1
        try:
            return self._wait(lambda: self.try_barrier(t), timeout)
        finally:
            with self._mu:
                self.barrier_waiters -= 1

    def kill(self) -> None:
        """Mark this incarnation dead; late callbacks become no-ops."""
        self.dead = True
