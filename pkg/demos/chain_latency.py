"""Mean workflow latency as the chain grows, speculative vs baseline."""

import statistics

from dse.sim.scenarios import ScenarioSpec, run


def main():
    print(f"{'K':>2} {'baseline ms':>12} {'speculative ms':>15}")
    for k in (1, 3, 5, 7):
        row = []
        for mode in ("baseline", "speculative"):
            spec = ScenarioSpec(name="chain", mode=mode, services=k, requests=100, rate=200.0, duration=1000.0)
            res = run(spec, 0)
            row.append(statistics.mean(r.latency for r in res.requests if r.ok))
        print(f"{k:>2} {row[0]:>12.1f} {row[1]:>15.1f}")


if __name__ == "__main__":
    main()
