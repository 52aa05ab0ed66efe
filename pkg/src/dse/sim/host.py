"""Generator versions of the blocking runtime calls, for simpy processes.

Each helper retries the runtime's ``try_*`` call and sleeps until the
runtime reports a state change.  Use them with ``yield from``.
"""

from __future__ import annotations

from ..core import Header
from ..runtime import Admission, Runtime, RolledBack, SThread


def changed(env, rt: Runtime):
    ev = env.event()

    def fire():
        rt.remove_listener(fire)
        if not ev.triggered:
            ev.succeed()

    rt.add_listener(fire)
    return ev


def _admit(env, rt: Runtime, attempt, hfn, emit, mid, kind):
    delayed = False
    try:
        while True:
            g = rt.gen
            r = attempt(delayed)
            h = hfn()
            if r is Admission.ENTERED:
                if emit is not None and h is not None:
                    emit(kind, mid=mid, vertex=list(rt.vertex), header_wl=h.world_line, deps=sorted(list(d) for d in h.deps))
                return True
            if r is Admission.DISCARD:
                if emit is not None and mid is not None:
                    emit("drop", mid=mid, reason="partition", header_wl=h.world_line, wl=rt.wl)
                return False
            if r is Admission.REFUSED:
                return None
            if h is not None and h.world_line > rt.wl and not delayed:
                rt.delayed += 1
                delayed = True
            if rt.gen == g:
                yield changed(env, rt)
    finally:
        if delayed:
            rt.delayed -= 1


def wait_connected(env, rt: Runtime):
    while not rt.connected:
        yield changed(env, rt)


def start_action(env, rt: Runtime, h=None, emit=None, mid=None):
    """True once inside an action; False if the header is stale; None if refused.

    With ``emit`` set, a ``consume`` or ``drop`` trace record is written for
    message ``mid``.
    """
    return (yield from _admit(env, rt, lambda d: rt.try_start_action(h, d), lambda: h, emit, mid, "consume"))


def merge(env, rt: Runtime, t: SThread, emit=None):
    return (yield from _admit(env, rt, lambda d: rt.try_merge(t, d), lambda: Header(t.world_line, t.deps), emit, None, "merge"))


def receive(env, rt: Runtime, t: SThread, h):
    while True:
        g = rt.gen
        r = rt.try_sthread_receive(t, h)
        if r is Admission.ENTERED:
            return True
        if r is Admission.DISCARD:
            return False
        if rt.gen == g:
            yield changed(env, rt)


def barrier(env, rt: Runtime, t: SThread):
    """Released dependencies; raises :class:`RolledBack`."""
    rt.barrier_waiters += 1
    try:
        while True:
            g = rt.gen
            r = rt.try_barrier(t)
            if r is not None:
                return r
            if rt.gen == g:
                yield changed(env, rt)
    finally:
        rt.barrier_waiters -= 1


__all__ = ["RolledBack", "barrier", "changed", "merge", "receive", "start_action", "wait_connected"]
