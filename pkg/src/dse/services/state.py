"""Snapshot-per-version backends: a counter and a key-value map."""

from __future__ import annotations

import copy

from ..runtime import StateObjectBackend
from ..sim.storage import SyncDevice


class SnapshotState(StateObjectBackend):
    """Copy-on-persist versioning of an in-memory value."""

    def __init__(self, device=None):
        self.device = device or SyncDevice()
        self.value = self.initial()
        self.snapshots: dict = {}

    def initial(self):
        raise NotImplementedError

    def size(self, value) -> int:
        return 16

    def persist(self, version, metadata, done) -> None:
        snap = copy.deepcopy(self.value)
        meta = bytes(metadata)

        def apply():
            self.snapshots[version] = (snap, meta)

        self.device.write(apply, done, size=self.size(snap) + len(meta))

    def restore(self, version) -> bytes:
        for v in [v for v in self.snapshots if v > version]:
            del self.snapshots[v]
        if version == 0:
            self.value = self.initial()
            return b""
        snap, meta = self.snapshots[version]
        self.value = copy.deepcopy(snap)
        return meta

    def prune(self, version) -> None:
        for v in [v for v in self.snapshots if v <= version]:
            del self.snapshots[v]

    def list_versions(self) -> list:
        return [(v, m) for v, (_s, m) in sorted(self.snapshots.items())]

    def crash(self) -> None:
        self.device.crash()
        self.value = self.initial()


class CounterState(SnapshotState):
    def initial(self):
        return 0


class KVState(SnapshotState):
    def initial(self):
        return {}

    def size(self, value) -> int:
        return 16 + 32 * len(value)
