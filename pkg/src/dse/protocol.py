"""Messages exchanged between runtimes and the coordinator.

Each message is a JSON object with a ``"type"`` tag.  Vertices travel as
``[object, world_line, version]`` triples; graph fragments and rollback plans
travel as lowercase hex of their binary encodings from :mod:`dse.core`.
Keys are sorted and separators compact, so encoding is deterministic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from typing import Any

from .core import (
    GraphFragment,
    MalformedRecord,
    ObjectId,
    RollbackPlan,
    Vertex,
    decode_fragment,
    decode_plan,
    encode_fragment,
    encode_plan,
)


@dataclass(frozen=True)
class MemberState:
    """What a member tells the coordinator about itself when (re)joining.

    ``fragments`` covers every unpruned durable version; ``floor`` is the
    version through which the member has pruned; ``anchors`` records, per
    applied rollback, the version the member actually kept.
    """

    obj: ObjectId
    world_line: int = 0
    applied_seq: int = 0
    fragments: tuple = ()
    floor: int = 0
    anchors: tuple = ()
    known_boundary: tuple = ()
    boundary_epoch: int = 0


@dataclass(frozen=True)
class Connect:
    state: MemberState


@dataclass(frozen=True)
class ConnectReply:
    obj: ObjectId
    plans: tuple = ()
    incarnation: int = 0


@dataclass(frozen=True)
class Report:
    obj: ObjectId
    fragments: tuple = ()


@dataclass(frozen=True)
class RollbackAck:
    obj: ObjectId
    seq: int
    retained: int
    fragments: tuple = ()


@dataclass(frozen=True)
class BoundaryQuery:
    obj: ObjectId
    epoch: int


@dataclass(frozen=True)
class BoundaryUpdate:
    epoch: int
    cutoffs: tuple = ()

    def as_dict(self) -> dict:
        return {v.object: v for v in self.cutoffs}


@dataclass(frozen=True)
class RollbackNotify:
    plan: RollbackPlan


@dataclass(frozen=True)
class RecoveryRequest:
    incarnation: int


@dataclass(frozen=True)
class RecoveryResponse:
    state: MemberState


MESSAGE_TYPES = {
    "connect": Connect,
    "connect_reply": ConnectReply,
    "report": Report,
    "rollback_ack": RollbackAck,
    "boundary_query": BoundaryQuery,
    "boundary_update": BoundaryUpdate,
    "rollback_notify": RollbackNotify,
    "recovery_request": RecoveryRequest,
    "recovery_response": RecoveryResponse,
}
_TAGS = {cls: tag for tag, cls in MESSAGE_TYPES.items()}

# per-field codecs; anything not listed is a plain JSON scalar
_FRAGMENTS = ("fragments",)
_VERTEX_LISTS = ("cutoffs", "known_boundary")


def _enc_state(s: MemberState) -> dict:
    return {
        "obj": s.obj,
        "world_line": s.world_line,
        "applied_seq": s.applied_seq,
        "fragments": [encode_fragment(f).hex() for f in s.fragments],
        "floor": s.floor,
        "anchors": [list(a) for a in s.anchors],
        "known_boundary": [list(v) for v in sorted(s.known_boundary)],
        "boundary_epoch": s.boundary_epoch,
    }


def _dec_state(d: dict) -> MemberState:
    return MemberState(
        obj=d["obj"],
        world_line=d["world_line"],
        applied_seq=d["applied_seq"],
        fragments=tuple(decode_fragment(bytes.fromhex(x)) for x in d["fragments"]),
        floor=d["floor"],
        anchors=tuple((int(a), int(b)) for a, b in d["anchors"]),
        known_boundary=tuple(Vertex(*v) for v in d["known_boundary"]),
        boundary_epoch=d["boundary_epoch"],
    )


def encode_message(msg: Any) -> bytes:
    tag = _TAGS.get(type(msg))
    if tag is None:
        raise TypeError(f"not a protocol message: {msg!r}")
    out: dict = {"type": tag}
    for f in fields(msg):
        val = getattr(msg, f.name)
        if f.name == "state":
            out[f.name] = _enc_state(val)
        elif f.name == "plan":
            out[f.name] = encode_plan(val).hex()
        elif f.name == "plans":
            out[f.name] = [encode_plan(p).hex() for p in val]
        elif f.name in _FRAGMENTS:
            out[f.name] = [encode_fragment(x).hex() for x in val]
        elif f.name in _VERTEX_LISTS:
            out[f.name] = [list(v) for v in sorted(val)]
        else:
            out[f.name] = val
    return json.dumps(out, sort_keys=True, separators=(",", ":")).encode()


def decode_message(b: bytes) -> Any:
    try:
        d = json.loads(b)
        cls = MESSAGE_TYPES[d.pop("type")]
        kw = {}
        for f in fields(cls):
            val = d[f.name]
            if f.name == "state":
                val = _dec_state(val)
            elif f.name == "plan":
                val = decode_plan(bytes.fromhex(val))
            elif f.name == "plans":
                val = tuple(decode_plan(bytes.fromhex(x)) for x in val)
            elif f.name in _FRAGMENTS:
                val = tuple(decode_fragment(bytes.fromhex(x)) for x in val)
            elif f.name in _VERTEX_LISTS:
                val = tuple(Vertex(*v) for v in val)
            kw[f.name] = val
        if d.keys() - {f.name for f in fields(cls)}:
            raise MalformedRecord("unexpected fields")
        return cls(**kw)
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as e:
        if isinstance(e, MalformedRecord):
            raise
        raise MalformedRecord(f"bad coordinator message: {e}") from None
