"""Value types shared by the runtime and the coordinator.

Everything here is an immutable value.  The byte formats produced by
:func:`encode_header`, :func:`encode_fragment`, :func:`encode_plan` and
:func:`encode_event` are part of the public contract; see ``docs/formats.md``.
All integers are little-endian and fixed width, and every set is written in
ascending ``(object, world_line, version)`` order so equal values always
encode to equal bytes.
"""

from __future__ import annotations

import enum
import struct
import zlib
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Union

ObjectId = int

U64_MAX = 2**64 - 1

_U8 = struct.Struct("<B")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_VERTEX = struct.Struct("<QQQ")


class MalformedHeader(ValueError):
    """Bytes that were not produced by :func:`encode_header`."""


class MalformedRecord(ValueError):
    """Bytes that were not produced by one of the other encoders."""


class Vertex(NamedTuple):
    """A recoverable point: one persisted (or about to be persisted) version."""

    object: ObjectId
    world_line: int
    version: int

    def __repr__(self) -> str:
        return f"V({self.object},{self.world_line},{self.version})"


def _check_vertex(v: Vertex) -> None:
    for x in v:
        if not isinstance(x, int) or x < 0 or x > U64_MAX:
            raise ValueError(f"vertex fields must be u64 integers: {v!r}")


@dataclass(frozen=True)
class Header:
    """Instrumentation attached to every message between participants."""

    world_line: int
    deps: frozenset = frozenset()

    def __post_init__(self) -> None:
        if not isinstance(self.deps, frozenset):
            object.__setattr__(self, "deps", frozenset(self.deps))
        if self.world_line < 0 or self.world_line > U64_MAX:
            raise ValueError("world_line out of range")
        for d in self.deps:
            _check_vertex(d)
            if d.world_line > self.world_line:
                raise ValueError(
                    f"dependency {d!r} is from a newer world-line than the header ({self.world_line})"
                )


@dataclass(frozen=True)
class GraphFragment:
    """A vertex together with the dependencies recorded while it was current."""

    vertex: Vertex
    out_edges: frozenset = frozenset()

    def __post_init__(self) -> None:
        if not isinstance(self.out_edges, frozenset):
            object.__setattr__(self, "out_edges", frozenset(self.out_edges))
        _check_vertex(self.vertex)
        for e in self.out_edges:
            _check_vertex(e)
        if self.vertex in self.out_edges:
            raise ValueError("a fragment cannot depend on its own vertex")


@dataclass(frozen=True)
class RollbackPlan:
    """A rollback decision, identified by its failure sequence number.

    ``targets`` maps every member to the vertex it must end up at (version 0
    means the initial, empty state).  ``lost`` lists the vertices removed from
    the coordinator's view, and ``skippable`` names members that lost nothing
    the coordinator knows of and may keep their in-memory state if their own
    unreported dependencies allow it.
    """

    failure_seq: int
    targets: Mapping[ObjectId, Vertex] = field(default_factory=dict)
    lost: frozenset = frozenset()
    skippable: frozenset = frozenset()

    def target_version(self, obj: ObjectId) -> int:
        t = self.targets.get(obj)
        return 0 if t is None else t.version


class EventKind(enum.IntEnum):
    MEMBER_JOIN = 1
    MEMBER_REJOIN = 2
    ROLLBACK_DECISION = 3


@dataclass(frozen=True)
class ClusterEvent:
    """One entry of the coordinator's persistent log."""

    kind: EventKind
    payload: Union[ObjectId, RollbackPlan]
    sequence: int


def merge_deps(a: Iterable[Vertex], b: Iterable[Vertex]) -> frozenset:
    """Union of two dependency sets, keeping one vertex per (object, world-line).

    A dependency on version ``n`` of an object implies every earlier version
    of the same world-line, so only the largest version is kept.
    """
    best: dict = {}
    for src in (a, b):
        for v in src:
            key = (v.object, v.world_line)
            cur = best.get(key)
            if cur is None or v.version > cur:
                best[key] = v.version
    return frozenset(Vertex(o, w, n) for (o, w), n in best.items())


# -- wire formats -----------------------------------------------------------


def _pack_vertices(vs: Iterable[Vertex]) -> bytes:
    ordered = sorted(vs)
    flat = [x for v in ordered for x in v]
    return _U32.pack(len(ordered)) + struct.pack(f"<{len(flat)}Q", *flat)


def _unpack_vertices(buf: bytes, off: int, err: type) -> tuple[list, int]:
    if off + 4 > len(buf):
        raise err("truncated vertex count")
    (n,) = _U32.unpack_from(buf, off)
    off += 4
    end = off + 24 * n
    if end > len(buf):
        raise err("vertex count exceeds available bytes")
    flat = struct.unpack_from(f"<{3 * n}Q", buf, off)
    out = [Vertex(flat[i], flat[i + 1], flat[i + 2]) for i in range(0, 3 * n, 3)]
    for prev, cur in zip(out, out[1:]):
        if not prev < cur:
            raise err("vertices not in canonical order")
    return out, end


def _frame(body: bytes) -> bytes:
    return _U32.pack(len(body)) + body


def _unframe(b: bytes, err: type) -> bytes:
    b = bytes(b)
    if len(b) < 4:
        raise err("truncated length prefix")
    (n,) = _U32.unpack_from(b, 0)
    if len(b) != 4 + n:
        raise err(f"length prefix says {n} bytes, got {len(b) - 4}")
    return b[4:]


def encode_header(h: Header) -> bytes:
    return _frame(_U64.pack(h.world_line) + _pack_vertices(h.deps))


def decode_header(b: bytes) -> Header:
    body = _unframe(b, MalformedHeader)
    if len(body) < 12:
        raise MalformedHeader("header body too short")
    (wl,) = _U64.unpack_from(body, 0)
    deps, end = _unpack_vertices(body, 8, MalformedHeader)
    if end != len(body):
        raise MalformedHeader("trailing bytes in header body")
    try:
        return Header(wl, frozenset(deps))
    except ValueError as e:
        raise MalformedHeader(str(e)) from None


def encode_fragment(f: GraphFragment) -> bytes:
    return _frame(_VERTEX.pack(*f.vertex) + _pack_vertices(f.out_edges))


def decode_fragment(b: bytes) -> GraphFragment:
    body = _unframe(b, MalformedRecord)
    if len(body) < 28:
        raise MalformedRecord("fragment body too short")
    v = Vertex(*_VERTEX.unpack_from(body, 0))
    edges, end = _unpack_vertices(body, 24, MalformedRecord)
    if end != len(body):
        raise MalformedRecord("trailing bytes in fragment body")
    try:
        return GraphFragment(v, frozenset(edges))
    except ValueError as e:
        raise MalformedRecord(str(e)) from None


def encode_plan(p: RollbackPlan) -> bytes:
    skip = sorted(p.skippable)
    body = (
        _U64.pack(p.failure_seq)
        + _pack_vertices(p.targets.values())
        + _pack_vertices(p.lost)
        + _U32.pack(len(skip))
        + struct.pack(f"<{len(skip)}Q", *skip)
    )
    return _frame(body)


def decode_plan(b: bytes) -> RollbackPlan:
    body = _unframe(b, MalformedRecord)
    if len(body) < 8:
        raise MalformedRecord("plan body too short")
    (seq,) = _U64.unpack_from(body, 0)
    targets, off = _unpack_vertices(body, 8, MalformedRecord)
    if len({t.object for t in targets}) != len(targets):
        raise MalformedRecord("duplicate target object")
    lost, off = _unpack_vertices(body, off, MalformedRecord)
    if off + 4 > len(body):
        raise MalformedRecord("truncated skip list")
    (ns,) = _U32.unpack_from(body, off)
    off += 4
    if off + 8 * ns != len(body):
        raise MalformedRecord("skip list length mismatch")
    skip = struct.unpack_from(f"<{ns}Q", body, off)
    if list(skip) != sorted(set(skip)):
        raise MalformedRecord("skip list not in canonical order")
    return RollbackPlan(seq, {t.object: t for t in targets}, frozenset(lost), frozenset(skip))


def encode_event(e: ClusterEvent) -> bytes:
    """Log record: ``u32 len | u32 crc32 | u8 kind | u64 sequence | payload``."""
    if e.kind is EventKind.ROLLBACK_DECISION:
        payload = encode_plan(e.payload)  # type: ignore[arg-type]
    else:
        payload = _U64.pack(e.payload)  # type: ignore[arg-type]
    body = _U8.pack(int(e.kind)) + _U64.pack(e.sequence) + payload
    return _U32.pack(len(body)) + _U32.pack(zlib.crc32(body)) + body


def decode_event(b: bytes) -> ClusterEvent:
    events, end = decode_events(b)
    if len(events) != 1 or end != len(b):
        raise MalformedRecord("expected exactly one event record")
    return events[0]


def decode_events(b: bytes) -> tuple[list, int]:
    """Decode consecutive log records.

    Returns the decoded events and the offset just past the last complete,
    checksum-valid record.  A torn tail is not an error; corruption before
    the tail is.
    """
    b = bytes(b)
    out = []
    off = 0
    while off < len(b):
        if off + 8 > len(b):
            break
        n, crc = struct.unpack_from("<II", b, off)
        body = b[off + 8 : off + 8 + n]
        if len(body) < n:
            break
        if zlib.crc32(body) != crc:
            if off + 8 + n == len(b):
                break
            raise MalformedRecord(f"checksum mismatch at offset {off}")
        if n < 9:
            raise MalformedRecord("event body too short")
        kind_raw = body[0]
        try:
            kind = EventKind(kind_raw)
        except ValueError:
            raise MalformedRecord(f"unknown event kind {kind_raw}") from None
        (seq,) = _U64.unpack_from(body, 1)
        rest = body[9:]
        if kind is EventKind.ROLLBACK_DECISION:
            payload = decode_plan(rest)
        else:
            if len(rest) != 8:
                raise MalformedRecord("membership payload must be one u64")
            (payload,) = _U64.unpack(rest)
        out.append(ClusterEvent(kind, payload, seq))
        off += 8 + n
    return out, off
