"""Command-line scenario runner.

``dse run`` executes a scenario for each seed and writes, per seed, a
request CSV and a trace, plus one ``summary.json``.  ``dse check TRACE``
runs the post-hoc oracles over an existing trace.  The exit status is 1
if any oracle fails, 2 on bad input.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

from .oracles import TRACE_ORACLES, check_trace
from .sim.cluster import Fault, UnknownTarget
from .sim.scenarios import MODES, InvalidSpec, ScenarioSpec, run
from .sim.trace import MalformedTrace, load_trace

SCENARIO_NAMES = ("chain", "tpc", "counter", "recovery-chain", "recovery-tpc", "microbench")
CSV_COLUMNS = ("rid", "start_ms", "end_ms", "latency_ms", "ok", "aborted", "attempts", "replied")
BENCH_COLUMNS = ("kind", "contexts", "ops", "seconds", "ops_per_s")
SUMMARY_VERSION = 1


def parse_seeds(text: str) -> tuple:
    """``"3"``, ``"0-9"`` or ``"1,4,7-8"``."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        lo, sep, hi = part.partition("-")
        try:
            if sep:
                a, b = int(lo), int(hi)
                if b < a:
                    raise ValueError
                out.extend(range(a, b + 1))
            else:
                out.append(int(lo))
        except ValueError:
            raise InvalidSpec(f"seeds: cannot parse {part!r}") from None
    if not out:
        raise InvalidSpec("seeds: must not be empty")
    return tuple(out)


def load_faults(path) -> tuple:
    """A JSON list of ``{"t", "kind", "target"}`` objects, or ``{"faults": [...]}``."""
    try:
        with open(path) as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise InvalidSpec(f"faults: {e}") from None
    if isinstance(data, dict):
        data = data.get("faults")
    if not isinstance(data, list):
        raise InvalidSpec("faults: expected a list of fault objects")
    try:
        faults = tuple(Fault(float(d["t"]), d["kind"], d.get("target")) for d in data)
    except (KeyError, TypeError, ValueError) as e:
        raise InvalidSpec(f"faults: {e}") from None
    faults = tuple(sorted(faults, key=lambda f: f.t))
    if any(b.t <= a.t for a, b in zip(faults, faults[1:])):
        raise InvalidSpec("faults: times must be distinct")
    return faults


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dse", description="Run speculative-recovery scenarios and check their traces.")
    sub = p.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="run a scenario")
    r.add_argument("--scenario", choices=SCENARIO_NAMES, default="chain")
    r.add_argument("--mode", choices=MODES, default="speculative")
    r.add_argument("--services", type=int, default=3, metavar="K", help="services in the chain")
    r.add_argument("--participants", type=int, default=4, metavar="P", help="2PC participants")
    r.add_argument("--clients", type=int, default=8, help="closed-loop 2PC clients")
    r.add_argument("--commit-period", type=float, default=10.0, metavar="MS")
    r.add_argument("--rate", type=float, default=100.0, help="open-loop requests per second")
    r.add_argument("--duration", type=float, default=None, metavar="MS", help="issue window (microbench: time per point)")
    r.add_argument("--requests", type=int, default=None, help="stop issuing after this many requests")
    r.add_argument("--persist-latency", type=float, nargs=2, default=None, metavar=("LO", "HI"))
    r.add_argument("--loss", type=float, default=0.0, help="application message loss probability")
    r.add_argument("--max-crashes", type=int, default=3, help="random fault density for recovery scenarios")
    g = r.add_mutually_exclusive_group()
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--seeds", default=None, help="e.g. 0-9 or 1,3,5")
    r.add_argument("--faults", default=None, metavar="FILE", help="JSON fault schedule")
    r.add_argument("--out", default="out", metavar="DIR", help="output directory (DSE_OUT overrides)")
    r.add_argument("--bench", default=None, help="microbench kind (default: all)")
    r.add_argument("--contexts", default="1,2,4,8,16", help="microbench context counts")
    r.add_argument("--jobs", type=int, default=1, help="seeds run in parallel worker processes")
    r.add_argument("--quiet", action="store_true")

    c = sub.add_parser("check", help="run the trace oracles over a trace file")
    c.add_argument("trace")
    c.add_argument("--oracle", action="append", choices=sorted(TRACE_ORACLES), help="limit to these oracles")
    return p


def spec_from_args(a) -> ScenarioSpec:
    if a.seeds is not None:
        seeds = parse_seeds(a.seeds)
    else:
        seeds = (a.seed if a.seed is not None else 0,)
    faults = load_faults(a.faults) if a.faults else None
    kw = dict(
        name=a.scenario,
        mode=a.mode,
        services=a.services,
        participants=a.participants,
        clients=a.clients,
        commit_period=a.commit_period,
        rate=a.rate,
        requests=a.requests,
        seeds=seeds,
        faults=faults,
        loss=a.loss,
        max_crashes=a.max_crashes,
    )
    if a.duration is not None:
        kw["duration"] = a.duration
    if a.persist_latency is not None:
        kw["persist_latency"] = tuple(a.persist_latency)
    return ScenarioSpec(**kw)


def oracle_report(records, names=None) -> dict:
    """Per-oracle verdict with the first violating record."""
    names = list(names) if names is not None else list(TRACE_ORACLES)
    try:
        found = check_trace(records, names)
    except (KeyError, TypeError, IndexError, ValueError) as e:
        raise MalformedTrace(f"trace is missing fields the oracles need: {e!r}") from None
    by_i = {r.get("i"): r for r in records}
    report = {}
    for n in names:
        vs = [v for v in found if v.oracle == n]
        first = vs[0] if vs else None
        report[n] = {
            "pass": not vs,
            "violations": len(vs),
            "first": None if first is None else {"index": first.index, "message": first.message, "record": by_i.get(first.index)},
        }
    return report


def _fmt(x):
    return "" if x is None else f"{x:.6f}"


def write_requests_csv(path, requests) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in requests:
            w.writerow([r.rid, _fmt(r.start), _fmt(r.end), _fmt(r.latency), int(r.ok), int(r.aborted), r.attempts, int(r.replied)])


def _stem(spec: ScenarioSpec, seed: int) -> str:
    return f"{spec.name}-{spec.mode}-s{seed}"


def run_seed(spec: ScenarioSpec, seed: int, out: Path) -> dict:
    res = run(spec, seed)
    stem = _stem(spec, seed)
    write_requests_csv(out / f"{stem}.csv", res.requests)
    res.trace.dump(out / f"{stem}.trace.jsonl")
    m = res.metrics()
    rec = m.pop("recovery_ms")
    m["recovery_ms"] = rec
    m["mean_recovery_ms"] = round(sum(rec) / len(rec), 6) if rec else None
    m["oracles"] = oracle_report(res.trace.records)
    m["csv"] = f"{stem}.csv"
    m["trace"] = f"{stem}.trace.jsonl"
    return m


def _spec_params(spec: ScenarioSpec) -> dict:
    return {
        "services": spec.services,
        "participants": spec.participants,
        "clients": spec.clients,
        "commit_period": spec.commit_period,
        "rate": spec.rate,
        "duration": spec.duration,
        "requests": spec.requests,
        "loss": spec.loss,
        "persist_latency": list(spec.persist_latency) if spec.persist_latency else None,
        "faults": None if spec.faults is None else [f.as_dict() for f in spec.faults],
    }


def run_simulation(spec: ScenarioSpec, out: Path, jobs: int = 1) -> dict:
    if jobs > 1 and len(spec.seeds) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as ex:
            per_seed = list(ex.map(run_seed, [spec] * len(spec.seeds), spec.seeds, [out] * len(spec.seeds)))
    else:
        per_seed = [run_seed(spec, s, out) for s in spec.seeds]
    ok = all(o["pass"] for m in per_seed for o in m["oracles"].values())
    return {
        "version": SUMMARY_VERSION,
        "scenario": spec.name,
        "mode": spec.mode,
        "params": _spec_params(spec),
        "seeds": per_seed,
        "oracles_pass": ok,
    }


def run_microbench_cli(a, out: Path) -> dict:
    from .realtime import MICROBENCHES, run_microbench

    kinds = [a.bench] if a.bench else list(MICROBENCHES)
    contexts = parse_seeds(a.contexts)
    seconds = (a.duration if a.duration is not None else 300.0) / 1000.0
    rows = []
    for k in kinds:
        rows.extend(r.as_dict() for r in run_microbench(k, contexts, seconds, commit_period=a.commit_period))
    with open(out / "microbench.csv", "w", newline="") as f:
        w = csv.DictWriter(f, BENCH_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    oracles = {}
    for k in kinds:
        pts = {r["contexts"]: r["ops_per_s"] for r in rows if r["kind"] == k}
        lo, hi = min(pts), max(pts)
        oracles[f"scaling/{k}"] = {"pass": pts[hi] >= pts[lo], "violations": int(pts[hi] < pts[lo]), "first": None}
    return {
        "version": SUMMARY_VERSION,
        "scenario": "microbench",
        "results": rows,
        "csv": "microbench.csv",
        "oracles": oracles,
        "oracles_pass": all(o["pass"] for o in oracles.values()),
    }


def _print_summary(summary: dict) -> None:
    if summary["scenario"] == "microbench":
        for r in summary["results"]:
            print(f"{r['kind']:>13} x{r['contexts']:<3} {r['ops_per_s']:>12.0f} ops/s")
    else:
        for m in summary["seeds"]:
            bad = [n for n, o in m["oracles"].items() if not o["pass"]]
            lat = m["mean_latency_ms"]
            lat = "-" if lat is None else f"{lat:.2f}"
            print(f"seed {m['seed']}: {m['completed']}/{m['issued']} ok, mean {lat} ms, oracles {'FAIL ' + ','.join(bad) if bad else 'pass'}")
    print("all oracles pass" if summary["oracles_pass"] else "ORACLE FAILURE")


def cmd_run(a) -> int:
    out = Path(os.environ.get("DSE_OUT") or a.out)
    out.mkdir(parents=True, exist_ok=True)
    if a.scenario == "microbench":
        summary = run_microbench_cli(a, out)
    else:
        summary = run_simulation(spec_from_args(a), out, a.jobs)
    with open(out / "summary.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    if not a.quiet:
        _print_summary(summary)
    return 0 if summary["oracles_pass"] else 1


def cmd_check(a) -> int:
    records = load_trace(a.trace)
    report = oracle_report(records, a.oracle)
    for n, o in report.items():
        if o["pass"]:
            print(f"{n}: pass")
        else:
            f = o["first"]
            print(f"{n}: FAIL ({o['violations']} violations); first at record {f['index']}: {f['message']}")
            print(f"  {json.dumps(f['record'], sort_keys=True)}")
    return 0 if all(o["pass"] for o in report.values()) else 1


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and argv[0] not in ("run", "check", "-h", "--help"):
        argv.insert(0, "run")
    a = _parser().parse_args(argv)
    try:
        return cmd_run(a) if a.cmd == "run" else cmd_check(a)
    except (InvalidSpec, MalformedTrace) as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return 2
    except UnknownTarget as e:
        print(f"UnknownTarget: no object {e.args[0]!r} to fault", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
