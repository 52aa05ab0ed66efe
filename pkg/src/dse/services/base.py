"""Request/reply records and the service base class used by the simulator."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Optional

from ..sim import host


@dataclass(frozen=True)
class Request:
    rid: str
    op: str
    args: tuple = ()


@dataclass(frozen=True)
class Reply:
    reply_for: str
    ok: bool
    value: Any = None
    error: Optional[str] = None


class RejectedStaleHeader(Exception):
    pass


class Service:
    """Logic hosted on a simulated object node.

    Subclasses implement ``op_<name>(envelope)`` generators.  ``mode`` is
    ``"speculative"`` or ``"baseline"``; in baseline mode services wait for
    a barrier before every reply.
    """

    retry_delay = 1.0

    def __init__(self, backend, mode: str = "speculative"):
        if mode not in ("speculative", "baseline"):
            raise ValueError(f"unknown mode {mode!r}")
        self.backend = backend
        self.mode = mode
        self.node = None

    def attach(self, node) -> None:
        self.node = node

    @property
    def rt(self):
        return self.node.rt

    @property
    def env(self):
        return self.node.env

    def emit(self, kind, **fields):
        return self.node.emit(kind, **fields)

    def on_start(self) -> None:
        pass

    def on_tick(self) -> None:
        pass

    def crash(self) -> None:
        self.backend.crash()

    def handle(self, envl):
        yield from host.wait_connected(self.env, self.rt)
        op = getattr(self, "op_" + envl.body.op, None)
        if op is None:
            self.emit("drop", mid=envl.mid, reason="orphan")
            return
        yield from op(envl)

    def enter(self, envl):
        """Enter an action for ``envl``; False if its header is stale.

        A refused delivery (delay buffer full) is retried after a pause,
        as the transport would.
        """
        while True:
            ok = yield from host.start_action(self.env, self.rt, envl.header, self.emit, envl.mid)
            if ok is not None:
                return ok
            yield self.env.timeout(self.retry_delay)

    def reply(self, envl, ok: bool, value=None, error=None, header=None) -> int:
        return self.node.send(envl.src, Reply(envl.body.rid, ok, value, error), header)

    def release(self, value_fn):
        """Finish the current action and produce the reply header.

        Speculative mode ends the action; baseline mode detaches and waits
        for a barrier first.  ``value_fn`` runs inside the action.
        Returns ``(value, header)``; raises RolledBack.
        """
        value = value_fn()
        if self.mode == "speculative":
            return value, self.rt.end_action()
        rt = self.rt
        t = rt.detach()
        yield from host.barrier(self.env, rt, t)
        return value, rt.sthread_send(t)

