"""A small workflow orchestrator on top of the speculative log.

Each workflow is a chain of calls to step services.  Status transitions
(``start``, ``step``, ``finish``) are log entries, so after a rollback or a
restart the orchestrator resumes from whatever prefix survived.
"""

from __future__ import annotations

import json

from ..runtime import RolledBack
from ..sim import host
from .base import Reply, Request, Service
from .speclog import SpecLog


class WorkflowRolledBack(Exception):
    pass


class WorkflowLog:
    """Status index over a :class:`SpecLog`; rebuilt whenever the log is cut back."""

    def __init__(self, log: SpecLog):
        self.log = log
        self._epoch = None
        self._seen = 0
        self._status: dict = {}

    def _sync(self) -> None:
        entries = self.log.entries_
        if self._epoch != self.log.epoch or self._seen > len(entries):
            self._epoch = self.log.epoch
            self._seen = 0
            self._status = {}
        for _off, raw in entries[self._seen :]:
            e = json.loads(raw)
            st = self._status.setdefault(e["wf"], {"started": False, "steps": [], "finished": False})
            if e["ev"] == "start":
                st["started"] = True
            elif e["ev"] == "step":
                assert e["i"] == len(st["steps"]), "workflow steps must be logged in order"
                st["steps"].append(e["r"])
            elif e["ev"] == "finish":
                st["finished"] = True
        self._seen = len(entries)

    def status(self, wf: str) -> dict:
        self._sync()
        st = self._status.get(wf, {"started": False, "steps": [], "finished": False})
        return {"started": st["started"], "steps": list(st["steps"]), "finished": st["finished"]}

    def _put(self, **e) -> None:
        self.log.append(json.dumps(e, sort_keys=True, separators=(",", ":")).encode())

    def start(self, wf):
        self._put(wf=wf, ev="start")

    def step(self, wf, i, r):
        self._put(wf=wf, ev="step", i=i, r=r)

    def finish(self, wf):
        self._put(wf=wf, ev="finish")


class WorkflowService(Service):
    """Orchestrator: ``execute(wf, services)`` calls each service in turn.

    The reply to the client leaves only after a barrier, so it is never
    speculative.  In baseline mode the orchestrator additionally waits for
    a barrier after every logged step.
    """

    call_timeout = 200.0
    max_attempts = 50

    def __init__(self, device=None, mode="speculative"):
        super().__init__(SpecLog(device), mode)
        self.wlog = WorkflowLog(self.backend)
        self._calls = 0

    def on_start(self):
        self.wlog = WorkflowLog(self.backend)

    def op_execute(self, envl):
        wf, chain = envl.body.args
        for attempt in range(self.max_attempts):
            try:
                result = yield from self._run(wf, list(chain), attempt)
            except (RolledBack, WorkflowRolledBack) as e:
                self.emit("wf_retry", wf=wf, attempt=attempt, why=type(e).__name__)
                yield self.env.timeout(self.cluster_retry_delay())
                continue
            self.emit("release", wf=wf, value=result)
            self.reply(envl, True, result)
            return
        self.reply(envl, False, error="WorkflowRolledBack")

    def cluster_retry_delay(self) -> float:
        return self.node.cluster.config.commit_period

    def _run(self, wf, chain, attempt):
        env, rt = self.env, self.rt
        yield from host.wait_connected(env, rt)
        while not (yield from host.start_action(env, rt)):
            pass
        st = self.wlog.status(wf)
        if not st["started"]:
            self.wlog.start(wf)
        steps = st["steps"]
        t = rt.detach()
        for i in range(len(steps), len(chain)):
            self._calls += 1
            rid = f"{wf}/{i}/{attempt}/{self._calls}"
            ev = self.node.expect(rid)
            self.node.send(chain[i], Request(rid, "step", (wf, i)), rt.sthread_send(t))
            got = yield ev | env.timeout(self.call_timeout)
            if ev not in got:
                self.node.forget(rid)
                raise WorkflowRolledBack(f"step {i} timed out")
            rep = got[ev]
            body: Reply = rep.body
            if not body.ok:
                raise WorkflowRolledBack(f"step {i}: {body.error}")
            if not (yield from host.receive(env, rt, t, rep.header)):
                self.emit("drop", mid=rep.mid, reason="partition")
                raise WorkflowRolledBack(f"step {i}: stale reply")
            self.emit("recv", mid=rep.mid)
            if not (yield from host.merge(env, rt, t, self.emit)):
                raise WorkflowRolledBack("merge after rollback")
            st = self.wlog.status(wf)
            if len(st["steps"]) != i:
                rt.end_action()
                raise WorkflowRolledBack("log cut back under the workflow")
            self.wlog.step(wf, i, body.value)
            steps.append(body.value)
            t = rt.detach()
            if self.mode == "baseline":
                yield from host.barrier(env, rt, t)
        if not (yield from host.merge(env, rt, t, self.emit)):
            raise WorkflowRolledBack("final merge after rollback")
        st = self.wlog.status(wf)
        if st["steps"] != steps:
            rt.end_action()
            raise WorkflowRolledBack("log cut back under the workflow")
        if not st["finished"]:
            self.wlog.finish(wf)
        t = rt.detach()
        yield from host.barrier(env, rt, t)
        return steps
