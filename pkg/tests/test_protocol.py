import pytest

from dse.core import GraphFragment, MalformedRecord, RollbackPlan, Vertex
from dse.protocol import (
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
    decode_message,
    encode_message,
)

F = GraphFragment(Vertex(1, 0, 2), frozenset({Vertex(2, 0, 1)}))
P = RollbackPlan(1, {1: Vertex(1, 0, 1)}, frozenset({Vertex(1, 0, 2)}), frozenset({2}))
STATE = MemberState(1, 2, 2, (F,), 1, ((1, 3), (2, 4)), (Vertex(2, 0, 1), Vertex(1, 0, 1)), 7)

MESSAGES = [
    Connect(STATE),
    ConnectReply(1, (P,), 2),
    Report(1, (F,)),
    RollbackAck(1, 1, 3, (F,)),
    BoundaryQuery(1, 4),
    BoundaryUpdate(5, (Vertex(1, 0, 1),)),
    RollbackNotify(P),
    RecoveryRequest(3),
    RecoveryResponse(STATE),
]


@pytest.mark.parametrize("msg", MESSAGES, ids=lambda m: type(m).__name__)
def test_roundtrip(msg):
    got = decode_message(encode_message(msg))
    if isinstance(msg, (Connect, RecoveryResponse)):
        # vertex lists come back sorted
        assert got.state.known_boundary == tuple(sorted(STATE.known_boundary))
        assert got.state.fragments == STATE.fragments and got.state.anchors == STATE.anchors
    else:
        assert got == msg


def test_encoding_is_deterministic():
    a = encode_message(BoundaryUpdate(1, (Vertex(2, 0, 1), Vertex(1, 0, 1))))
    b = encode_message(BoundaryUpdate(1, (Vertex(1, 0, 1), Vertex(2, 0, 1))))
    assert a == b
    assert a == b'{"cutoffs":[[1,0,1],[2,0,1]],"epoch":1,"type":"boundary_update"}'


@pytest.mark.parametrize("raw", [b"", b"{}", b'{"type":"nope"}', b'{"type":"boundary_query","obj":1}', b'{"type":"boundary_query","obj":1,"epoch":2,"x":0}'])
def test_bad_messages(raw):
    with pytest.raises(MalformedRecord):
        decode_message(raw)


def test_non_message_cannot_be_encoded():
    with pytest.raises(TypeError):
        encode_message(object())
