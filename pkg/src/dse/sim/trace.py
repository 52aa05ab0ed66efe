"""Line-delimited JSON trace of a simulation run.

One record per line, keys sorted, compact separators, so two runs with
the same configuration produce byte-identical files.
"""

from __future__ import annotations

import json
from typing import Callable, Iterable


class MalformedTrace(ValueError):
    pass


def _dump(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True, separators=(",", ":"))


class TraceLog:
    def __init__(self, clock: Callable[[], float]):
        self.clock = clock
        self.records: list = []

    def emit(self, kind: str, **fields) -> dict:
        rec = {"i": len(self.records), "t": round(self.clock(), 6), "kind": kind}
        rec.update(fields)
        self.records.append(rec)
        return rec

    def of(self, *kinds: str) -> list:
        return [r for r in self.records if r["kind"] in kinds]

    def dumps(self) -> str:
        return "".join(_dump(r) + "\n" for r in self.records)

    def dump(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.dumps())


def load_trace(path) -> list:
    out = []
    with open(path) as f:
        for n, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise MalformedTrace(f"line {n}: {e}") from None
            if not isinstance(rec, dict) or "kind" not in rec or "t" not in rec:
                raise MalformedTrace(f"line {n}: not a trace record")
            out.append(rec)
    return out


def parse_records(lines: Iterable[str]) -> list:
    return [json.loads(x) for x in lines if x.strip()]
