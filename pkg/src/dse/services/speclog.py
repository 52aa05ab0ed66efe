"""Speculative write-ahead log.

Records are ``u8 kind | u32 len | u32 crc32 | payload``.  Kind 1 is an
application entry; kind 2 is a commit record whose payload is
``u64 version | metadata``.  Persisting version ``v`` appends a commit
record and flushes everything up to it.  After a crash the log is cut back
to the end of the last intact commit record, so recovered contents are
always a prefix of what was written that ends at a commit.
"""

from __future__ import annotations

import os
import struct
import threading
import zlib
from typing import Optional

from ..runtime import StateObjectBackend
from ..sim.storage import SyncDevice

ENTRY = 1
COMMIT = 2
_HEAD = struct.Struct("<BII")
_VER = struct.Struct("<Q")


def frame(kind: int, payload: bytes) -> bytes:
    return _HEAD.pack(kind, len(payload), zlib.crc32(payload)) + payload


def scan(buf: bytes):
    """Yield ``(kind, payload, start, end)`` for each intact record."""
    off = 0
    n = len(buf)
    while off + _HEAD.size <= n:
        kind, ln, crc = _HEAD.unpack_from(buf, off)
        end = off + _HEAD.size + ln
        if kind not in (ENTRY, COMMIT) or end > n:
            return
        payload = bytes(buf[off + _HEAD.size : end])
        if zlib.crc32(payload) != crc:
            return
        yield kind, payload, off, end
        off = end


def last_commit_end(buf: bytes) -> int:
    end = 0
    for kind, _p, _s, e in scan(buf):
        if kind == COMMIT:
            end = e
    return end


class SpecLog(StateObjectBackend):
    def __init__(self, device=None, path: Optional[str] = None):
        self.device = device or SyncDevice()
        self.path = path
        self.durable = bytearray()
        self.floor = 0
        # appends run inside concurrent actions
        self._mu = threading.RLock()
        if path is not None and os.path.exists(path):
            with open(path, "rb") as f:
                self.durable = bytearray(f.read())
            if os.path.exists(path + ".floor"):
                with open(path + ".floor") as f:
                    self.floor = int(f.read() or 0)
        self._recover()

    # durable side

    def _recover(self) -> None:
        cut = last_commit_end(self.durable)
        if cut < len(self.durable):
            del self.durable[cut:]
            self._file_truncate(cut)
        self.buf = bytearray(self.durable)
        self.flushed = len(self.buf)
        self._gen = getattr(self, "_gen", 0) + 1
        self.epoch = getattr(self, "epoch", 0) + 1
        self.commits: dict = {}
        self.metas: dict = {}
        self.entries_: list = []
        for kind, payload, start, end in scan(self.buf):
            if kind == COMMIT:
                (v,) = _VER.unpack_from(payload)
                self.commits[v] = end
                self.metas[v] = payload[8:]
            else:
                self.entries_.append((start, payload))
        self.durable_versions = {v for v in self.commits if v > self.floor}

    def _file_append(self, chunk: bytes) -> None:
        if self.path is None:
            return
        with open(self.path, "ab") as f:
            f.write(chunk)
            f.flush()
            os.fsync(f.fileno())

    def _file_truncate(self, n: int) -> None:
        if self.path is not None and os.path.exists(self.path):
            with open(self.path, "r+b") as f:
                f.truncate(n)

    def _submit(self, done=None, versions=()) -> None:
        start = self.flushed
        chunk = bytes(self.buf[start:])
        self.flushed = len(self.buf)
        gen = self._gen

        def apply():
            if gen != self._gen or len(self.durable) != start:
                return
            self.durable += chunk
            self._file_append(chunk)
            self.durable_versions.update(versions)

        def torn(frac: float):
            if gen == self._gen and len(self.durable) == start:
                self.durable += chunk[: int(len(chunk) * frac)]

        self.device.write(apply, done, size=len(chunk), torn=torn)

    # application side

    def append(self, payload: bytes) -> int:
        rec = frame(ENTRY, payload)
        with self._mu:
            off = len(self.buf)
            self.buf += rec
            self.entries_.append((off, bytes(payload)))
        return off

    def entries(self) -> list:
        return [p for _o, p in self.entries_]

    def flush_background(self) -> None:
        """Write out appended entries ahead of the next commit record."""
        with self._mu:
            if self.flushed < len(self.buf):
                self._submit()

    # StateObjectBackend

    def persist(self, version, metadata, done) -> None:
        with self._mu:
            self.buf += frame(COMMIT, _VER.pack(version) + bytes(metadata))
            self.commits[version] = len(self.buf)
            self.metas[version] = bytes(metadata)
            self._submit(done, (version,))

    def restore(self, version) -> bytes:
        cut = 0 if version == 0 else self.commits[version]
        self._gen += 1
        self.epoch += 1
        del self.buf[cut:]
        if len(self.durable) > cut:
            del self.durable[cut:]
            self._file_truncate(cut)
        self.flushed = min(self.flushed, cut)
        for v in [v for v in self.commits if v > version]:
            del self.commits[v]
            del self.metas[v]
        self.durable_versions = {v for v in self.durable_versions if v <= version}
        self.entries_ = [(o, p) for o, p in self.entries_ if o < cut]
        return self.metas.get(version, b"")

    def prune(self, version) -> None:
        if version > self.floor:
            self.floor = version
            self.durable_versions = {v for v in self.durable_versions if v > version}
            if self.path is not None:
                with open(self.path + ".floor", "w") as f:
                    f.write(str(version))

    def list_versions(self) -> list:
        return [(v, self.metas[v]) for v in sorted(self.durable_versions)]

    def crash(self) -> None:
        """Lose everything not yet durable, then recover from the durable bytes."""
        self.device.crash()
        self._recover()
