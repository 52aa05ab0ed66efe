"""Reference checks, written independently of the code they check.

Two families live here:

* brute-force graph oracles for the coordinator's boundary and rollback
  computations, small enough to enumerate every subset;
* post-hoc trace oracles that read a simulation trace (a list of dicts) and
  report every record that breaks an invariant.

The log-prefix oracle parses the speculative-log byte format on its own
rather than borrowing the log's scanner.
"""

from __future__ import annotations

import struct
import zlib
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional

import numpy as np

from .core import Vertex

MAX_BRUTE_VERTICES = 20


# -- graph oracles -------------------------------------------------------------


def _deps(v: Vertex, edges: Mapping, lineage: Mapping) -> list:
    """Explicit out-edges plus the predecessor version of the same object."""
    out = list(edges[v])
    p = lineage.get((v.object, v.version - 1))
    out.append(p if p is not None else Vertex(v.object, -1, v.version - 1))
    return out


def _lineage(edges: Mapping) -> dict:
    return {(v.object, v.version): v for v in edges}


def brute_force_closure(edges: Mapping, floor: Optional[Mapping] = None) -> frozenset:
    """Union of every dependency-closed subset of the persistent vertices.

    ``edges`` maps each persistent vertex to its out-edges.  A dependency
    is satisfied if it is in the subset, or its version is at or below the
    object's ``floor`` (pruned, hence committed).
    """
    floor = floor or {}
    vs = sorted(edges)
    n = len(vs)
    if n > MAX_BRUTE_VERTICES:
        raise ValueError(f"brute force limited to {MAX_BRUTE_VERTICES} vertices, got {n}")
    if n == 0:
        return frozenset()
    idx = {v: i for i, v in enumerate(vs)}
    lin = _lineage(edges)
    need = np.zeros(n, dtype=np.int64)
    impossible = np.zeros(n, dtype=bool)
    for i, v in enumerate(vs):
        for d in _deps(v, edges, lin):
            if d.version <= floor.get(d.object, 0):
                continue
            j = idx.get(d)
            if j is None:
                impossible[i] = True
            else:
                need[i] |= 1 << j
    subsets = np.arange(1 << n, dtype=np.int64)
    closed = np.ones(1 << n, dtype=bool)
    for i in range(n):
        member = (subsets >> i) & 1 == 1
        if impossible[i]:
            closed &= ~member
        else:
            closed &= ~member | ((need[i] & ~subsets) == 0)
    union = int(np.bitwise_or.reduce(subsets[closed]))
    return frozenset(v for i, v in enumerate(vs) if union >> i & 1)


def brute_force_cutoffs(edges: Mapping, floor: Optional[Mapping] = None) -> dict:
    cut: dict = {}
    for v in brute_force_closure(edges, floor):
        if v.object not in cut or v.version > cut[v.object].version:
            cut[v.object] = v
    return cut


def naive_cascade(edges: Mapping, floor: Optional[Mapping], obj, surviving: Iterable[Vertex]) -> tuple:
    """Survivors and lost vertices after ``obj`` restarts with ``surviving``.

    Drops ``obj``'s unreported vertices, then repeatedly drops any vertex
    with a dependency that is neither present nor pruned, until nothing
    dangles.  Lost also counts ``obj``'s non-surviving vertices that are
    only known as edge targets.
    """
    floor = floor or {}
    surviving = set(surviving)
    alive = {v for v in edges if not (v.object == obj and v not in surviving)}
    lin = _lineage(edges)
    while True:
        dangling = set()
        for v in alive:
            for d in _deps(v, edges, lin):
                if d.version > floor.get(d.object, 0) and d not in alive:
                    dangling.add(v)
                    break
        if not dangling:
            break
        alive -= dangling
    lost = set(edges) - alive
    for es in edges.values():
        for e in es:
            if e.object == obj and e not in edges and e not in surviving and e.version > floor.get(obj, 0):
                lost.add(e)
    return frozenset(alive), frozenset(lost)


# -- trace oracles ---------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    oracle: str
    index: int
    message: str

    def __str__(self) -> str:
        return f"[{self.oracle}] record {self.index}: {self.message}"


def _v(x) -> Vertex:
    return Vertex(x[0], x[1], x[2])


def check_closure(records) -> list:
    """Every announced boundary is monotone and dependency-closed.

    The oracle rebuilds each object's lineage (version -> vertex) from
    persist, rollback and connect records.  At every boundary, each newly
    covered version must exist, be durable, and depend only on vertices
    that are on their object's lineage and inside the boundary.
    """
    out = []
    lineage: dict = defaultdict(dict)
    edges: dict = {}
    durable: set = set()
    checked: dict = defaultdict(int)
    last: dict = {}
    for r in records:
        k = r["kind"]
        if k == "persist":
            v = _v(r["vertex"])
            lineage[v.object][v.version] = v
            edges[v] = [_v(e) for e in r["edges"]]
        elif k == "persisted":
            durable.add(_v(r["vertex"]))
        elif k == "rollback" and not r.get("skip") and not r.get("catchup"):
            lin = lineage[r["obj"]]
            for n in [n for n in lin if n > r["target"]]:
                del lin[n]
        elif k == "connect":
            keep = set(r["durable"])
            lin = lineage[r["obj"]]
            for n in [n for n in lin if n not in keep]:
                del lin[n]
        elif k in ("boundary", "coord_recover_done"):
            cut = {c[0]: _v(c) for c in r["cutoffs"]}
            for o, c in last.items():
                if o in cut and cut[o].version < c.version:
                    out.append(Violation("closure", r["i"], f"cutoff of {o} moved back from {c.version} to {cut[o].version}"))
            for o, c in cut.items():
                if c.version == 0:
                    continue
                lin = lineage[o]
                if lin.get(c.version) != c:
                    out.append(Violation("closure", r["i"], f"cutoff {c!r} is not on {o}'s lineage"))
                    continue
                for n in range(checked[o] + 1, c.version + 1):
                    v = lin.get(n)
                    if v is None:
                        out.append(Violation("closure", r["i"], f"{o} has no version {n} below its cutoff"))
                        break
                    if v not in durable:
                        out.append(Violation("closure", r["i"], f"{v!r} is inside the boundary but not durable"))
                    for e in edges.get(v, ()):
                        ce = cut.get(e.object)
                        if ce is None or e.version > ce.version:
                            out.append(Violation("closure", r["i"], f"{v!r} depends on {e!r} outside the boundary"))
                        elif lineage[e.object].get(e.version, e) != e:
                            out.append(Violation("closure", r["i"], f"{v!r} depends on {e!r}, which was rolled back"))
                checked[o] = max(checked[o], c.version)
            for o, c in cut.items():
                if o not in last or c.version > last[o].version:
                    last[o] = c
    return out


def check_sequencing(records) -> list:
    """Each object applies rollback decisions one by one with no gap.

    Within an incarnation the applied sequence numbers start right after
    the world line the object reconnected with.  An object alive at the
    end has applied every decision it was sent.
    """
    out = []
    applied: dict = {}
    alive: dict = {}
    top = 0
    for r in records:
        k = r["kind"]
        if k == "connect":
            applied[r["obj"]] = r["vertex"][1]
            alive[r["obj"]] = True
        elif k == "crash" and r["obj"] in alive:
            alive[r["obj"]] = False
        elif k == "rollback":
            o, seq = r["obj"], r["seq"]
            want = applied.get(o, 0) + 1
            if seq != want:
                out.append(Violation("sequencing", r["i"], f"object {o} applied plan {seq}, expected {want}"))
            applied[o] = seq
            top = max(top, seq)
        elif k == "connected":
            top = max([top] + list(r.get("plans", ())))
    for o, up in alive.items():
        if up and applied.get(o, 0) < top:
            out.append(Violation("sequencing", records[-1]["i"] if records else 0, f"object {o} stopped at plan {applied.get(o, 0)} of {top}"))
    return out


def check_admission(records) -> list:
    """Actions only run on a matching world line and after their dependencies' versions.

    A consumed message must also have been delivered to the consumer.
    """
    out = []
    delivered = set()
    for r in records:
        k = r["kind"]
        if k == "deliver":
            delivered.add((r["mid"], r["dst"]))
        elif k in ("consume", "merge"):
            v = _v(r["vertex"])
            if r["header_wl"] != v.world_line:
                out.append(Violation("admission", r["i"], f"header world line {r['header_wl']} entered {v!r}"))
            for d in r["deps"]:
                d = _v(d)
                if d.object != v.object and d.version > v.version:
                    out.append(Violation("admission", r["i"], f"{v!r} consumed {d!r} from a later commit interval"))
            if k == "consume" and r.get("mid") is not None and (r["mid"], r["obj"]) not in delivered:
                out.append(Violation("admission", r["i"], f"message {r['mid']} consumed but never delivered"))
    return out


def check_barriers(records) -> list:
    """No dependency released by a barrier is later rolled back."""
    out = []
    released: dict = defaultdict(list)
    for r in records:
        k = r["kind"]
        if k == "barrier":
            for d in r["deps"]:
                d = _v(d)
                released[d.object].append((d, r["i"]))
        elif k == "rollback":
            for d, i in released.get(r["obj"], ()):
                if r["seq"] > d.world_line and d.version > r["kept"]:
                    out.append(Violation("barrier", r["i"], f"plan {r['seq']} discards {d!r} released at record {i}"))
    return out


def check_releases(records) -> list:
    """Externally visible results are stable.

    A workflow released twice must carry the same value, and so must a
    2PC transaction's decision; a committed client result needs a
    committed decision.
    """
    out = []
    wf: dict = {}
    tx: dict = {}
    for r in records:
        k = r["kind"]
        if k == "release":
            prev = wf.setdefault(r["wf"], r["value"])
            if prev != r["value"]:
                out.append(Violation("release", r["i"], f"workflow {r['wf']} released {r['value']} after {prev}"))
        elif k == "decision":
            prev = tx.setdefault(r["tx"], r["commit"])
            if prev != r["commit"]:
                out.append(Violation("release", r["i"], f"transaction {r['tx']} decided both ways"))
        elif k == "tx_result" and r["commit"] and tx.get(r["tx"]) is not True:
            out.append(Violation("release", r["i"], f"transaction {r['tx']} reported committed without a commit decision"))
        elif k == "session_release" and r["value"] != 3:
            out.append(Violation("release", r["i"], f"session {r['session']} released {r['value']}, expected 3"))
    return out


def check_tpc(records) -> list:
    """A transaction the client saw committed never loses a TxStart afterwards."""
    out = []
    starts: dict = defaultdict(list)
    committed: dict = {}
    for r in records:
        k = r["kind"]
        if k == "txstart":
            starts[r["obj"]].append((_v(r["vertex"]), r["tx"]))
        elif k == "tx_result" and r["commit"]:
            committed[r["tx"]] = r["i"]
        elif k == "rollback":
            for v, tx in starts.get(r["obj"], ()):
                if tx in committed and r["seq"] > v.world_line and v.version > r["kept"]:
                    out.append(Violation("tpc", r["i"], f"plan {r['seq']} discards the TxStart of committed transaction {tx}"))
    return out


def check_log_records(records) -> list:
    """Every speculative log came back from a crash as a prefix ending at a commit."""
    out = []
    for r in records:
        if r["kind"] != "log_recovered":
            continue
        if not r["prefix"]:
            out.append(Violation("log_prefix", r["i"], f"object {r['obj']} recovered bytes that were never written"))
        elif not r["at_commit"]:
            out.append(Violation("log_prefix", r["i"], f"object {r['obj']} recovered {r['length']} bytes, not ending at a commit"))
    return out


def check_silence(records) -> list:
    """Without failures the coordinator never decides a rollback."""
    crashed = False
    out = []
    for r in records:
        if r["kind"] == "crash":
            crashed = True
        elif r["kind"] == "plan" and not crashed:
            out.append(Violation("silence", r["i"], f"rollback plan {r['seq']} without any failure"))
    return out


TRACE_ORACLES = {
    "closure": check_closure,
    "sequencing": check_sequencing,
    "admission": check_admission,
    "barrier": check_barriers,
    "release": check_releases,
    "tpc": check_tpc,
    "log_prefix": check_log_records,
    "silence": check_silence,
}


def check_trace(records, oracles: Optional[Iterable[str]] = None) -> list:
    """Run the named trace oracles (all by default); violations sorted by record."""
    names = list(oracles) if oracles is not None else list(TRACE_ORACLES)
    out = []
    for n in names:
        out.extend(TRACE_ORACLES[n](records))
    return sorted(out, key=lambda v: (v.index, v.oracle))


# -- speculative log prefix ------------------------------------------------------

_REC = struct.Struct("<BII")


def commit_ends(buf: bytes) -> list:
    """Offsets just past each intact commit record (kind 2), in order."""
    ends = []
    off = 0
    while off + _REC.size <= len(buf):
        kind, n, crc = _REC.unpack_from(buf, off)
        end = off + _REC.size + n
        if kind not in (1, 2) or end > len(buf) or zlib.crc32(buf[off + _REC.size : end]) != crc:
            break
        if kind == 2:
            ends.append(end)
        off = end
    return ends


def check_log_prefix(recovered: bytes, shadow: bytes) -> Optional[str]:
    """None if ``recovered`` is a prefix of ``shadow`` ending at a commit record."""
    recovered, shadow = bytes(recovered), bytes(shadow)
    if not shadow.startswith(recovered):
        for i, (a, b) in enumerate(zip(recovered, shadow)):
            if a != b:
                return f"recovered log differs from the written bytes at offset {i}"
        return f"recovered log is {len(recovered)} bytes, longer than the {len(shadow)} written"
    if recovered and len(recovered) not in commit_ends(shadow):
        return f"recovered log ends at offset {len(recovered)}, not at a commit record"
    return None


__all__ = [
    "MAX_BRUTE_VERTICES",
    "TRACE_ORACLES",
    "Violation",
    "brute_force_closure",
    "brute_force_cutoffs",
    "check_closure",
    "check_log_prefix",
    "check_trace",
    "commit_ends",
    "naive_cascade",
]
