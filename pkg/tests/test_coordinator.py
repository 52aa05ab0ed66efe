import random

import pytest
from graphgen import random_graph, random_survivors
from hypothesis import given, settings
from hypothesis import strategies as st

from dse.coordinator import (
    Coordinator,
    DependencyGraph,
    FileLog,
    GraphConflict,
    LogAppendFailed,
    MemoryLog,
    RecoverableBoundary,
    StaleWorldLine,
    compute_boundary,
    compute_closure,
    compute_rollback,
)
from dse.core import EventKind, GraphFragment, Vertex
from dse.oracles import brute_force_closure, brute_force_cutoffs, naive_cascade
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
)


def F(v, *edges):
    return GraphFragment(Vertex(*v), frozenset(Vertex(*e) for e in edges))


def graph(*frags):
    g = DependencyGraph()
    for f in frags:
        g.add(f)
    return g


class Outbox(list):
    def __call__(self, dst, msg):
        self.append((dst, msg))

    def of(self, cls, dst=None):
        return [m for d, m in self if isinstance(m, cls) and (dst is None or d == dst)]


def joined(n=2):
    out = Outbox()
    log = MemoryLog()
    c = Coordinator(log, out)
    c.start()
    for o in range(1, n + 1):
        c.submit(Connect(MemberState(o)))
    return c, log, out


# -- graph -------------------------------------------------------------------


def test_conflicting_vertex_is_rejected():
    g = graph(F((1, 0, 1)))
    with pytest.raises(GraphConflict):
        g.add(F((1, 1, 1)))
    with pytest.raises(GraphConflict):
        g.add(F((1, 0, 1), (2, 0, 1)))
    assert g.add(F((1, 0, 1))) is False


def test_prune_keeps_versions_above_floor():
    g = graph(F((1, 0, 1)), F((1, 0, 2)), F((1, 0, 3)))
    g.prune_through(1, 2)
    assert set(g.edges) == {Vertex(1, 0, 3)}
    assert g.add(F((1, 0, 2))) is False


def test_referenced_ignores_pruned_and_persistent_targets():
    g = graph(F((1, 0, 1), (2, 0, 1)), F((2, 0, 1)), F((3, 0, 5), (1, 0, 9)))
    g.prune_through(2, 1)
    assert g.referenced() == {Vertex(1, 0, 9)}


# -- closure and boundary --------------------------------------------------------


def test_closure_needs_every_edge_target():
    g = graph(F((1, 0, 1), (2, 0, 1)))
    assert compute_closure(g) == set()
    g.add(F((2, 0, 1)))
    assert compute_closure(g) == {Vertex(1, 0, 1), Vertex(2, 0, 1)}


def test_closure_needs_predecessor_version():
    g = graph(F((1, 0, 2)))
    assert compute_closure(g) == set()
    g.add(F((1, 0, 1)))
    assert compute_closure(g) == {Vertex(1, 0, 1), Vertex(1, 0, 2)}


def test_cycle_of_persistent_vertices_is_closed():
    g = graph(F((1, 0, 1), (2, 0, 1)), F((2, 0, 1), (1, 0, 1)))
    assert compute_closure(g) == {Vertex(1, 0, 1), Vertex(2, 0, 1)}


def test_pruned_dependency_counts_as_committed():
    g = graph(F((1, 0, 3), (2, 0, 4)))
    g.prune_through(1, 2)
    g.prune_through(2, 4)
    assert compute_closure(g) == {Vertex(1, 0, 3)}


def test_boundary_never_moves_back_and_epoch_counts_changes():
    g = graph(F((1, 0, 1)), F((1, 0, 2)))
    b1 = compute_boundary(g, RecoverableBoundary())
    assert b1.cutoffs == {1: Vertex(1, 0, 2)} and b1.epoch == 1
    assert compute_boundary(g, b1).epoch == 1
    g.remove([Vertex(1, 0, 2)])
    b2 = compute_boundary(g, b1)
    assert b2.cutoffs[1] == Vertex(1, 0, 2) and b2.epoch == 1
    assert b2.contains(Vertex(1, 5, 2)) and not b2.contains(Vertex(1, 0, 3))


def test_rollback_cascades_through_dependants():
    g = graph(
        F((1, 0, 1)),
        F((1, 0, 2)),
        F((2, 0, 1), (1, 0, 2)),
        F((3, 0, 1), (2, 0, 1)),
        F((3, 0, 2), (1, 0, 3)),
    )
    survivors, lost = compute_rollback(g, 1, [Vertex(1, 0, 1)])
    assert survivors == {Vertex(1, 0, 1)}
    assert lost == {Vertex(1, 0, 2), Vertex(1, 0, 3), Vertex(2, 0, 1), Vertex(3, 0, 1), Vertex(3, 0, 2)}


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32))
def test_boundary_matches_brute_force(seed):
    g, edges, floor = random_graph(random.Random(seed))
    b = compute_boundary(g)
    assert set(b.vertices) == brute_force_closure(edges, floor)
    assert dict(b.cutoffs) == brute_force_cutoffs(edges, floor)


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32))
def test_rollback_matches_naive_cascade(seed):
    rng = random.Random(seed)
    g, edges, floor = random_graph(rng)
    obj = rng.choice(sorted({v.object for v in edges}) or [1])
    surv = random_survivors(rng, edges, obj)
    survivors, lost = compute_rollback(g, obj, surv)
    assert (set(survivors), set(lost)) == tuple(map(set, naive_cascade(edges, floor, obj, surv)))


# -- logs --------------------------------------------------------------------------


def test_file_log_replays_and_drops_torn_tail(tmp_path):
    p = tmp_path / "coord.log"
    log = FileLog(p)
    c = Coordinator(log, Outbox())
    c.start()
    c.submit(Connect(MemberState(1)))
    c.submit(Connect(MemberState(2)))
    with open(p, "ab") as f:
        f.write(b"\x20\x00\x00\x00garbage")
    again = FileLog(p)
    assert [e.payload for e in again.replay()] == [1, 2]
    assert p.stat().st_size == 50


def test_file_log_append_failure(tmp_path):
    log = FileLog(tmp_path / "missing" / "coord.log")
    with pytest.raises(LogAppendFailed):
        log.append([], lambda: None)


def test_memory_log_crash_loses_inflight_appends():
    pending = []
    log = MemoryLog(schedule=lambda d, fn: pending.append(fn))
    done = []
    c = Coordinator(log, Outbox())
    c.start()
    c.submit(Connect(MemberState(1)))
    assert len(log) == 0 and c.members == set()
    log.crash()
    pending.pop()()
    assert len(log) == 0
    assert done == []


# -- coordinator ---------------------------------------------------------------------


def test_join_is_logged_once_and_replied():
    c, log, out = joined(2)
    assert [e.kind for e in log.replay()] == [EventKind.MEMBER_JOIN] * 2
    assert [m.obj for m in out.of(ConnectReply)] == [1, 2]


def test_failure_free_traffic_writes_nothing_to_the_log():
    c, log, out = joined(2)
    before = log.appends
    for v in range(1, 20):
        c.submit(Report(1, (F((1, 0, v), (2, 0, v)),)))
        c.submit(Report(2, (F((2, 0, v)),)))
        c.submit(BoundaryQuery(1, 0))
        c.tick()
    assert log.appends == before
    assert c.boundary.cutoffs[1] == Vertex(1, 0, 19)
    assert out.of(BoundaryUpdate, 1)


def test_query_waits_for_a_newer_epoch():
    c, log, out = joined(1)
    c.submit(BoundaryQuery(1, 0))
    assert not out.of(BoundaryUpdate)
    c.submit(Report(1, (F((1, 0, 1)),)))
    assert out.of(BoundaryUpdate, 1)[-1].epoch == 1


def test_rejoin_decides_and_broadcasts_a_rollback():
    c, log, out = joined(2)
    c.submit(Report(1, (F((1, 0, 1)),)))
    c.submit(Report(2, (F((2, 0, 1), (1, 0, 2)), F((2, 0, 2), (1, 0, 3)))))
    # object 1 crashed before version 2 became durable
    c.submit(Connect(MemberState(1, fragments=(F((1, 0, 1)),))))
    kinds = [e.kind for e in log.replay()]
    assert kinds[-2:] == [EventKind.MEMBER_REJOIN, EventKind.ROLLBACK_DECISION]
    plan = log.replay()[-1].payload
    assert plan.failure_seq == 1
    assert plan.target_version(1) == 1 and plan.target_version(2) == 0
    assert plan.lost == {Vertex(1, 0, 2), Vertex(1, 0, 3), Vertex(2, 0, 1), Vertex(2, 0, 2)}
    assert plan.skippable == frozenset()
    assert out.of(RollbackNotify, 2)[-1].plan == plan
    assert out.of(ConnectReply, 1)[-1].plans == (plan,)


def test_stale_fragment_is_refused_after_a_decision():
    c, log, out = joined(2)
    c.submit(Report(1, (F((1, 0, 1), (2, 0, 1)),)))
    c.submit(Connect(MemberState(1, fragments=())))
    assert not c.is_valid(Vertex(1, 0, 1))
    assert c.is_valid(Vertex(1, 1, 1))
    with pytest.raises(StaleWorldLine):
        c.report_persistence(1, [F((1, 0, 1))])
    # a retained version reported in the acknowledgement raises the anchor
    c.submit(RollbackAck(2, 1, 4, (F((2, 0, 3)),)))
    assert c.is_valid(Vertex(2, 0, 4)) and not c.is_valid(Vertex(2, 0, 5))


def test_restarted_coordinator_collects_member_state():
    c, log, out = joined(2)
    c.submit(Report(1, (F((1, 0, 1)), F((1, 0, 2)))))
    c.submit(Report(2, (F((2, 0, 1), (1, 0, 1)),)))
    c.tick()
    before = dict(c.boundary.cutoffs)
    out2 = Outbox()
    c2 = Coordinator(log, out2, incarnation=2)
    c2.start()
    assert c2.recovering and {d for d, m in out2 if isinstance(m, RecoveryRequest)} == {1, 2}
    c2.submit(BoundaryQuery(1, 0))
    assert not out2.of(BoundaryUpdate)
    c2.submit(RecoveryResponse(MemberState(1, fragments=(F((1, 0, 1)), F((1, 0, 2))), known_boundary=tuple(before.values()), boundary_epoch=c.boundary.epoch)))
    assert c2.recovering
    c2.submit(RecoveryResponse(MemberState(2, fragments=(F((2, 0, 1), (1, 0, 1)),))))
    assert not c2.recovering
    assert c2.boundary.epoch > c.boundary.epoch
    for o, v in before.items():
        assert c2.boundary.cutoffs[o].version >= v.version
    assert out2.of(BoundaryUpdate, 1) and out2.of(BoundaryUpdate, 2)


def test_plan_targets_never_go_below_the_boundary():
    c, log, out = joined(2)
    c.submit(Report(1, (F((1, 0, 1)), F((1, 0, 2)))))
    c.tick()
    plan = c.plan_rollback(1, [Vertex(1, 0, 1), Vertex(1, 0, 2)])
    assert plan.target_version(1) == 2 and plan.lost == frozenset()
    assert plan.skippable == frozenset({2})
