"""Counter and key-value step services."""

from __future__ import annotations

from ..runtime import RolledBack
from ..sim import host
from .base import Service
from .state import CounterState, KVState


class CounterService(Service):
    """``inc(amount)`` adds to a single counter and returns the new value."""

    def __init__(self, device=None, mode="speculative"):
        super().__init__(CounterState(device), mode)

    def op_inc(self, envl):
        (amount,) = envl.body.args
        if not (yield from self.enter(envl)):
            self.reply(envl, False, error="RejectedStaleHeader")
            return

        def apply():
            self.backend.value += amount
            return self.backend.value

        try:
            value, h = yield from self.release(apply)
        except RolledBack:
            self.reply(envl, False, error="RolledBack")
            return
        self.reply(envl, True, value, header=h)


class SessionCounterService(Service):
    """Per-session counters; ``inc(session, amount, release)``.

    With ``release`` set the reply waits for a barrier, so its value is
    safe to show outside the system.
    """

    def __init__(self, device=None, mode="speculative"):
        super().__init__(KVState(device), mode)

    def op_inc(self, envl):
        session, amount, release = envl.body.args
        if not (yield from self.enter(envl)):
            self.reply(envl, False, error="RejectedStaleHeader")
            return
        kv = self.backend.value
        kv[session] = kv.get(session, 0) + amount
        value = kv[session]
        rt = self.rt
        if not release and self.mode == "speculative":
            self.reply(envl, True, value, header=rt.end_action())
            return
        t = rt.detach()
        try:
            yield from host.barrier(self.env, rt, t)
        except RolledBack:
            self.reply(envl, False, error="RolledBack")
            return
        self.reply(envl, True, value, header=rt.sthread_send(t))


class StepService(Service):
    """Idempotent workflow step: ``step(wf, i)`` returns a per-service sequence number.

    A repeated ``(wf, i)`` returns the stored result instead of applying twice.
    """

    def __init__(self, device=None, mode="speculative"):
        super().__init__(KVState(device), mode)

    def op_step(self, envl):
        wf, i = envl.body.args
        if not (yield from self.enter(envl)):
            self.reply(envl, False, error="RejectedStaleHeader")
            return

        def apply():
            kv = self.backend.value
            key = f"{wf}:{i}"
            if key not in kv:
                kv["n"] = kv.get("n", 0) + 1
                kv[key] = kv["n"]
            return kv[key]

        try:
            value, h = yield from self.release(apply)
        except RolledBack:
            self.reply(envl, False, error="RolledBack")
            return
        self.reply(envl, True, value, header=h)
