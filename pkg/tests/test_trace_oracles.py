"""Each trace oracle must catch a deliberately broken trace."""

import copy

import pytest

from dse.oracles import check_trace
from dse.sim.cluster import Fault
from dse.sim.scenarios import ScenarioSpec, run


def tr(*recs):
    return [dict(r, i=i, t=float(i)) for i, r in enumerate(recs)]


def names(records, only=None):
    return {v.oracle for v in check_trace(records, only)}


@pytest.fixture(scope="module")
def recovered():
    spec = ScenarioSpec(name="recovery-chain", duration=400.0, faults=(Fault(150.0, "crash", 3), Fault(180.0, "restart", 3)))
    res = run(spec, 3)
    recs = res.trace.records
    assert not check_trace(recs)
    assert any(r["kind"] == "rollback" for r in recs)
    return recs


def reindex(recs):
    return [dict(r, i=i) for i, r in enumerate(recs)]


def test_clean_trace_has_no_violations(recovered):
    assert names(recovered) == set()


def test_closure_rejects_backwards_cutoff(recovered):
    recs = copy.deepcopy(recovered)
    b = [r for r in recs if r["kind"] == "boundary" and any(c[2] > 0 for c in r["cutoffs"])][-1]
    late = copy.deepcopy(b)
    late["cutoffs"] = [[c[0], c[1], 0 if c[2] > 0 else c[2]] for c in late["cutoffs"]]
    assert "closure" in names(reindex(recs + [late]), ["closure"])


def test_closure_rejects_edge_into_removed_vertex():
    recs = tr(
        {"kind": "connect", "obj": 1, "vertex": [1, 0, 1], "durable": []},
        {"kind": "connect", "obj": 2, "vertex": [2, 0, 1], "durable": []},
        {"kind": "persist", "obj": 2, "vertex": [2, 0, 1], "edges": []},
        {"kind": "persisted", "obj": 2, "vertex": [2, 0, 1]},
        {"kind": "rollback", "obj": 2, "seq": 1, "skip": False, "target": 0, "kept": 0, "old": [2, 0, 2], "new": [2, 1, 1]},
        {"kind": "persist", "obj": 1, "vertex": [1, 0, 1], "edges": [[2, 0, 1]]},
        {"kind": "persisted", "obj": 1, "vertex": [1, 0, 1]},
        {"kind": "boundary", "cutoffs": [[1, 0, 1], [2, 0, 1]]},
    )
    found = check_trace(recs, ["closure"])
    assert found and found[0].index == 7


def test_closure_rejects_non_durable_vertex():
    recs = tr(
        {"kind": "persist", "obj": 1, "vertex": [1, 0, 1], "edges": []},
        {"kind": "boundary", "cutoffs": [[1, 0, 1]]},
    )
    assert "not durable" in check_trace(recs, ["closure"])[0].message


def test_sequencing_rejects_skipped_plan(recovered):
    recs = copy.deepcopy(recovered)
    rb = next(r for r in recs if r["kind"] == "rollback")
    rb["seq"] += 1
    assert "sequencing" in names(recs, ["sequencing"])


def test_sequencing_rejects_object_left_behind():
    recs = tr(
        {"kind": "connect", "obj": 1, "vertex": [1, 0, 1], "durable": []},
        {"kind": "connected", "obj": 2, "plans": [1]},
    )
    assert "stopped at plan 0 of 1" in check_trace(recs, ["sequencing"])[0].message


def test_admission_rejects_wrong_world_line_and_undelivered(recovered):
    recs = copy.deepcopy(recovered)
    c = next(r for r in recs if r["kind"] == "consume" and r.get("mid") is not None)
    c["header_wl"] += 1
    assert "admission" in names(recs, ["admission"])
    recs = tr({"kind": "consume", "obj": 2, "mid": 9, "vertex": [2, 0, 1], "header_wl": 0, "deps": [[1, 0, 5]]})
    msgs = [v.message for v in check_trace(recs, ["admission"])]
    assert len(msgs) == 2


def test_barrier_rejects_discarded_dependency():
    recs = tr(
        {"kind": "barrier", "obj": 1, "deps": [[2, 0, 3]]},
        {"kind": "rollback", "obj": 2, "seq": 1, "skip": False, "target": 2, "kept": 2, "old": [2, 0, 4], "new": [2, 1, 3]},
    )
    assert names(recs) >= {"barrier"}


def test_release_rejects_contradictions():
    recs = tr(
        {"kind": "release", "obj": 1, "wf": "wf0", "value": [1, 2]},
        {"kind": "release", "obj": 1, "wf": "wf0", "value": [1, 3]},
        {"kind": "tx_result", "obj": "c", "tx": "t0", "commit": True},
        {"kind": "session_release", "obj": "c", "session": "s0", "value": 2},
        {"kind": "decision", "obj": 1, "tx": "t1", "commit": True, "deps": []},
        {"kind": "decision", "obj": 1, "tx": "t1", "commit": False, "deps": []},
    )
    assert [v.index for v in check_trace(recs, ["release"])] == [1, 2, 3, 5]


def test_tpc_rejects_lost_txstart():
    recs = tr(
        {"kind": "txstart", "obj": 2, "tx": "t0", "vertex": [2, 0, 5]},
        {"kind": "tx_result", "obj": "c", "tx": "t0", "commit": True},
        {"kind": "rollback", "obj": 2, "seq": 1, "skip": False, "target": 4, "kept": 4, "old": [2, 0, 6], "new": [2, 1, 5]},
    )
    assert [v.oracle for v in check_trace(recs, ["tpc"])] == ["tpc"]


def test_log_prefix_and_silence():
    recs = tr(
        {"kind": "plan", "obj": 0, "seq": 1},
        {"kind": "log_recovered", "obj": 2, "length": 10, "written": 20, "prefix": False, "at_commit": True},
        {"kind": "log_recovered", "obj": 2, "length": 10, "written": 20, "prefix": True, "at_commit": False},
    )
    assert [(v.oracle, v.index) for v in check_trace(recs)] == [("silence", 0), ("log_prefix", 1), ("log_prefix", 2)]
