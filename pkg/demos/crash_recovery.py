"""Crash a service mid-run, then check the trace with every oracle."""

from dse.oracles import check_trace
from dse.sim.cluster import Fault
from dse.sim.scenarios import ScenarioSpec, run

faults = (Fault(200.0, "crash", 3), Fault(240.0, "restart", 3))
res = run(ScenarioSpec(name="recovery-chain", duration=600.0, faults=faults), 1)
m = res.metrics()
print(f"{m['completed']}/{m['issued']} requests completed, {m['rollbacks_planned']} rollback(s)")
print(f"restart to rejoin: {m['recovery_ms']} ms")
for r in res.trace.of("rollback"):
    print(f"  object {r['obj']} applied plan {r['seq']}: kept version {r['kept']}{' (skip)' if r['skip'] else ''}")
bad = check_trace(res.trace.records)
print("oracles:", "all pass" if not bad else bad[0])
