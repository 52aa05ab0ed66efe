"""Two-phase commit with speculative logging at every party.

Only the commit-protocol records are written; transactions carry no data.
"""

from __future__ import annotations

import json

from ..runtime import RolledBack
from ..sim import host
from .base import Reply, Request, Service
from .speclog import SpecLog


class TxAborted(Exception):
    pass


class _TxLog:
    def __init__(self, log: SpecLog):
        self.log = log
        self._epoch = None
        self._seen = 0
        self.records: dict = {}

    def _sync(self):
        entries = self.log.entries_
        if self._epoch != self.log.epoch or self._seen > len(entries):
            self._epoch, self._seen, self.records = self.log.epoch, 0, {}
        for _o, raw in entries[self._seen :]:
            e = json.loads(raw)
            self.records.setdefault(e["tx"], []).append(e["ev"])
        self._seen = len(entries)

    def has(self, tx, ev) -> bool:
        self._sync()
        return ev in self.records.get(tx, ())

    def put(self, tx, ev) -> None:
        self.log.append(json.dumps({"ev": ev, "tx": tx}, sort_keys=True, separators=(",", ":")).encode())


class TpcParticipant(Service):
    """Logs TxStart, votes on prepare, records the decision."""

    def __init__(self, device=None, mode="speculative"):
        super().__init__(SpecLog(device), mode)
        self.txlog = _TxLog(self.backend)

    def on_start(self):
        self.txlog = _TxLog(self.backend)

    def _logged(self, envl, ev_fn):
        if not (yield from self.enter(envl)):
            self.reply(envl, False, error="RejectedStaleHeader")
            return
        try:
            value, h = yield from self.release(ev_fn)
        except RolledBack:
            self.reply(envl, False, error="RolledBack")
            return
        self.reply(envl, True, value, header=h)

    def op_txstart(self, envl):
        (tx,) = envl.body.args

        def apply():
            self.txlog.put(tx, "start")
            self.emit("txstart", tx=tx, vertex=list(self.rt.vertex))
            return True

        yield from self._logged(envl, apply)

    def op_prepare(self, envl):
        (tx,) = envl.body.args

        def apply():
            vote = self.txlog.has(tx, "start")
            self.txlog.put(tx, "prepared" if vote else "refused")
            return vote

        yield from self._logged(envl, apply)

    def op_decide(self, envl):
        tx, commit = envl.body.args
        if not (yield from self.enter(envl)):
            return
        self.txlog.put(tx, "commit" if commit else "abort")
        self.rt.end_action()


class TpcCoordinator(Service):
    """Runs prepare/decide for a transaction whose TxStart headers the client relays.

    The client learns the outcome only after the decision is committed.
    """

    vote_timeout = 200.0

    def __init__(self, participants, device=None, mode="speculative"):
        super().__init__(SpecLog(device), mode)
        self.participants = list(participants)
        self.txlog = _TxLog(self.backend)
        self._n = 0

    def on_start(self):
        self.txlog = _TxLog(self.backend)

    def op_commit(self, envl):
        tx, headers = envl.body.args
        try:
            commit = yield from self._decide(tx, headers)
        except (RolledBack, TxAborted) as e:
            self.emit("tx_abort", tx=tx, why=str(e) or type(e).__name__)
            self.reply(envl, True, False)
            return
        self.reply(envl, True, commit)

    def _decide(self, tx, headers):
        env, rt = self.env, self.rt
        while not (yield from host.start_action(env, rt)):
            pass
        self.txlog.put(tx, "begin")
        t = rt.detach()
        for h in headers:
            if not (yield from host.receive(env, rt, t, h)):
                raise TxAborted("stale TxStart header")
        evs = []
        for p in self.participants:
            self._n += 1
            rid = f"{tx}/prep/{self._n}"
            ev = self.node.expect(rid)
            self.node.send(p, Request(rid, "prepare", (tx,)), rt.sthread_send(t))
            evs.append((rid, ev))
        deadline = env.timeout(self.vote_timeout)
        votes = []
        for rid, ev in evs:
            got = yield ev | deadline
            if ev not in got:
                for r, _e in evs:
                    self.node.forget(r)
                raise TxAborted("vote timeout")
            rep = got[ev]
            body: Reply = rep.body
            if not body.ok:
                raise TxAborted(f"prepare failed: {body.error}")
            if not (yield from host.receive(env, rt, t, rep.header)):
                self.emit("drop", mid=rep.mid, reason="partition")
                raise TxAborted("stale vote")
            self.emit("recv", mid=rep.mid)
            votes.append(bool(body.value))
        if not (yield from host.merge(env, rt, t, self.emit)):
            raise RolledBack("merge after rollback")
        commit = all(votes)
        self.txlog.put(tx, "commit" if commit else "abort")
        t = rt.detach()
        released = yield from host.barrier(env, rt, t)
        self.emit("decision", deps=sorted(list(d) for d in released), tx=tx, commit=commit)
        for p in self.participants:
            self._n += 1
            self.node.send(p, Request(f"{tx}/dec/{self._n}", "decide", (tx, commit)), rt.sthread_send(t))
        return commit
