"""Two links that share one medium split its capacity.

Channels in the same group are entangled: while both carry traffic each runs
at half its nominal rate, so their combined throughput never exceeds the
faster channel on its own. The table shows bits served per second.

    python3 demos/shared_medium.py
"""
from semstack.core import to_ps
from semstack.sim import load_scenario, run

SCENARIO = """\
name: shared-demo
duration: 9.0
embodiments:
  - {name: radio, stability: 1.0e-12, malleability: 1.0e9}
nodes:
  - {name: a}
  - {name: b, position: [100, 0, 0]}
  - {name: c, position: [0, 100, 0]}
  - {name: d, position: [100, 100, 0]}
channels:
  - {name: ab, attached: [a, b], embodiment: radio, capacity: 1.0e6, group: air}
  - {name: cd, attached: [c, d], embodiment: radio, capacity: 1.0e6, group: air}
flows:
  - {name: first, source: a, destination: {node: b}, start: 3.0,
     app: {kind: bulk, total_bits: 3000000}}
  - {name: second, source: c, destination: {node: d}, start: 4.0,
     app: {kind: bulk, total_bits: 1000000}}
"""


def served(result, channel, lo, hi):
    # integrate the piecewise-constant service rate recorded in the trace
    total, since, rate, busy = 0.0, None, 0.0, False
    for rec in result.trace.records:
        if rec.kind == "tx" and rec.ids[1] == channel:
            busy, since = True, rec.time
        elif rec.kind in ("rate", "tx-end") and channel in rec.ids[:2]:
            if busy and since is not None:
                a, b = max(since, lo), min(rec.time, hi)
                total += rate * max(0, b - a) / 1e12
            since = rec.time
            if rec.kind == "rate":
                rate = rec.fields["rate"]
            else:
                busy = False
    return total


def main():
    result = run(load_scenario(SCENARIO))
    ab, cd = (result.sim.topo.by_name[n] for n in ("ab", "cd"))
    print(f"{'second':>6}  {'ab':>9}  {'cd':>9}  {'total':>9}")
    for s in range(3, 9):
        lo, hi = to_ps(s), to_ps(s + 1)
        x, y = served(result, ab, lo, hi), served(result, cd, lo, hi)
        print(f"{s:6d}  {x:9.0f}  {y:9.0f}  {x + y:9.0f}")


if __name__ == "__main__":
    main()
