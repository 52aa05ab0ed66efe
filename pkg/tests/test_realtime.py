import socket
import time

import pytest

from dse.coordinator import MemoryLog
from dse.realtime import CoordinatorServer, RealObject, ThreadDevice, read_frame, run_microbench, write_frame


def test_frames_roundtrip_and_truncation():
    a, b = socket.socketpair()
    write_frame(a, b"hello")
    write_frame(a, b"")
    assert read_frame(b) == b"hello" and read_frame(b) == b""
    a.sendall(b"\x05\x00\x00\x00ab")
    a.close()
    with pytest.raises(ConnectionError):
        read_frame(b)
    b.close()


def test_thread_device_drops_writes_after_crash():
    d = ThreadDevice(latency_ms=20.0)
    done = []
    d.write(lambda: done.append(1))
    d.crash()
    d.write(lambda: done.append(2))
    time.sleep(0.1)
    d.close()
    assert done == [2]


def test_objects_connect_and_commit_over_tcp():
    log = MemoryLog()
    server = CoordinatorServer(commit_period=5.0, event_log=log).start()
    a = b = None
    try:
        a = RealObject(1, server.address, commit_period=5.0).connect(timeout=5.0)
        b = RealObject(2, server.address, commit_period=5.0).connect(timeout=5.0)
        a.rt.start_action()
        h = a.rt.end_action()
        assert b.rt.start_action(h)
        b.rt.end_action()
        deadline = time.monotonic() + 5.0

        def covered():
            cut = server.coord.boundary.cutoffs
            return all(o in cut and cut[o].version >= 1 for o in (1, 2))

        while time.monotonic() < deadline and not covered():
            time.sleep(0.01)
        assert covered()
        assert log.appends == 2
    finally:
        for o in (a, b):
            if o is not None:
                o.close()
        server.close()


@pytest.mark.parametrize("kind", ["local-action", "send-receive", "detach-merge"])
def test_microbench_reports_every_point(kind):
    res = run_microbench(kind, contexts=(1, 2, 2), seconds=0.05, repeats=1)
    assert [r.contexts for r in res] == [1, 2]
    assert all(r.ops > 0 and r.ops_per_s > 0 for r in res)


def test_unknown_microbench():
    with pytest.raises(ValueError):
        run_microbench("nope")
