"""Adaptive streaming over a link whose capacity steps down twice.

The camera renegotiates its contract for every ADU and picks the richest
encoding that fits the offered capacity. Once the link drops below the
cheapest encoding the stream keeps going, flagged as degraded.

    python3 demos/adaptive_streaming.py
"""
from pathlib import Path

from semstack.core import ps_to_seconds
from semstack.sim import load_scenario_file, run

SCENARIO = Path(__file__).resolve().parent.parent / "scenarios" / "staircase.yaml"


def main():
    result = run(load_scenario_file(SCENARIO))
    (flow,) = result.sim.flows.values()
    print(f"{'time':>6}  {'offered b/s':>12}  {'encoding b/s':>12}  degraded")
    for t, enc, degraded, offered in flow.selections:
        print(f"{float(ps_to_seconds(t)):6.1f}  {offered:12.0f}  {enc.rate:12.0f}  {degraded}")
    row = result.metrics.row("video")
    print(f"\ndelivered {row.adus_delivered}/{row.adus_sent} ADUs, "
          f"{row.degraded_intervals} degraded intervals")
    print("digest", result.digest)


if __name__ == "__main__":
    main()
