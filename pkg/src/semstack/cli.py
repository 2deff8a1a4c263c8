"""``semstack`` command line: run, validate, clock-bits, lightcone, report.

Exit status 0 on success, 1 on runtime or validation failure, 2 on usage
errors. Diagnostics go to stderr; data goes to stdout or files.
"""
from __future__ import annotations

import argparse
import math
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from fractions import Fraction
from pathlib import Path

from .core import (PLANCK_TIME, SECONDS_PER_DAY, SECONDS_PER_YEAR, SPEED_OF_LIGHT, ClockSpec,
                   SpaceTimePoint, clock_bits, exact, light_cone_reachable, light_cone_slack)
from .errors import SemstackError

UNITS = {
    "s": Fraction(1),
    "ms": Fraction(1, 10**3),
    "us": Fraction(1, 10**6),
    "ns": Fraction(1, 10**9),
    "d": Fraction(SECONDS_PER_DAY),
    "y": SECONDS_PER_YEAR,
    "planck": PLANCK_TIME,
}
_QUANTITY = re.compile(r"^\s*([0-9]*\.?[0-9]+(?:[eE][+-]?[0-9]+)?)?\s*([a-z]+)\s*$")


def parse_duration(text: str) -> Fraction:
    """``"1000y"`` -> seconds as an exact Fraction. A bare unit means one of it."""
    m = _QUANTITY.match(text)
    if not m or m.group(2) not in UNITS:
        raise argparse.ArgumentTypeError(
            f"bad quantity {text!r}; expected a number followed by one of {', '.join(UNITS)}")
    value = Fraction(m.group(1)) if m.group(1) else Fraction(1)
    return value * UNITS[m.group(2)]


def _number(text: str) -> Fraction:
    try:
        return exact(text)
    except (ValueError, ZeroDivisionError, SemstackError):
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None


def _u64(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive_int(text: str) -> int:
    v = _u64(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


# --- subcommands ------------------------------------------------------------

def _run_one(scenario_path: str, seed, out_dir: str, trace: bool) -> tuple[int, str]:
    from .sim.engine import Simulation
    from .sim.metrics import export_metrics
    from .sim.scenario import load_scenario_file

    sc = load_scenario_file(scenario_path)
    sim = Simulation(sc, seed, keep_trace=trace)
    result = sim.run()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    export_metrics(result.metrics, out / "metrics.csv")
    eff = sc.to_dict()
    eff["seed"] = sim.seed
    import yaml
    (out / "effective-config.yaml").write_text(yaml.safe_dump(eff, sort_keys=False), encoding="utf-8")
    if trace:
        result.trace.dump(out / "trace.txt")
    return sim.seed, result.digest


def cmd_run(args) -> int:
    from .sim.scenario import load_scenario_file

    if args.sweep_seeds is None:
        seed, digest = _run_one(args.scenario, args.seed, args.out, args.trace)
        print(digest)
        return 0
    base = args.seed if args.seed is not None else load_scenario_file(args.scenario).seed
    seeds = [base + k for k in range(args.sweep_seeds)]
    if seeds[-1] >= 2**64:
        raise SemstackError("seed sweep overflows the 64-bit seed range")
    dirs = [str(Path(args.out) / f"seed-{s}") for s in seeds]
    with ProcessPoolExecutor() as pool:
        results = list(pool.map(_run_one, [args.scenario] * len(seeds), seeds, dirs,
                                [args.trace] * len(seeds)))
    for seed, digest in results:
        print(f"{seed} {digest}")
    return 0


def cmd_validate(args) -> int:
    from .sim.scenario import load_scenario_file

    sc = load_scenario_file(args.scenario)
    if args.dump:
        sys.stdout.write(sc.dump())
    else:
        print(f"ok: {sc.name} ({len(sc.nodes)} nodes, {len(sc.channels)} channels, "
              f"{len(sc.flows)} flows)")
    return 0


def cmd_clock_bits(args) -> int:
    spec = ClockSpec(args.duration, args.resolution)
    print(clock_bits(spec))
    print(f"intervals {spec.intervals}")
    return 0


def cmd_lightcone(args) -> int:
    origin = SpaceTimePoint(*args.coords[:4])
    target = SpaceTimePoint(*args.coords[4:])
    speed = args.speed if args.speed is not None else SPEED_OF_LIGHT
    ok = light_cone_reachable(origin, target, speed)
    print("reachable" if ok else "unreachable")
    print(f"slack {light_cone_slack(origin, target, speed)!r}")
    return 0


def _stats(values: list) -> tuple[float, float, float]:
    vals = [v for v in values if not (isinstance(v, float) and math.isnan(v))]
    if not vals:
        return math.nan, math.nan, math.nan
    return sum(vals) / len(vals), min(vals), max(vals)


def cmd_report(args) -> int:
    from .sim.metrics import COLUMNS, read_metrics

    reports = []
    for path in args.files:
        try:
            reports.append(read_metrics(path))
        except (OSError, ValueError) as exc:
            print(f"semstack report: {path}: {exc}", file=sys.stderr)
            return 1
    order: list[str] = []
    rows: dict[str, list] = {}
    for rep in reports:
        for r in rep.rows:
            if r.flow_id not in rows:
                order.append(r.flow_id)
                rows[r.flow_id] = []
            rows[r.flow_id].append(r)
    metric_cols = COLUMNS[1:]
    header = ["flow_id", "count"] + [f"{c}_{s}" for c in metric_cols for s in ("mean", "min", "max")]
    print(",".join(header))
    for fid in order:
        cells = [fid, str(len(rows[fid]))]
        for c in metric_cols:
            cells.extend(repr(float(v)) for v in _stats([getattr(r, c) for r in rows[fid]]))
        print(",".join(cells))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="semstack", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a scenario and write metrics")
    r.add_argument("scenario")
    r.add_argument("--seed", type=_u64, default=None, help="override the scenario's master seed")
    r.add_argument("--out", default="out", help="output directory (default: out)")
    r.add_argument("--trace", action="store_true", help="also write trace.txt")
    r.add_argument("--sweep-seeds", type=_positive_int, default=None, metavar="N",
                   help="run N consecutive seeds in parallel, one subdirectory each")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("validate", help="check a scenario file")
    v.add_argument("scenario")
    v.add_argument("--dump", action="store_true", help="print the effective configuration")
    v.set_defaults(func=cmd_validate)

    c = sub.add_parser("clock-bits", help="bits for a clock spanning DURATION at RESOLUTION")
    c.add_argument("duration", type=parse_duration)
    c.add_argument("resolution", type=parse_duration)
    c.set_defaults(func=cmd_clock_bits)

    lc = sub.add_parser("lightcone", help="is (t1,x1,y1,z1) reachable from (t0,x0,y0,z0)?",
                        usage="%(prog)s [-h] T0 X0 Y0 Z0 T1 X1 Y1 Z1 [speed]")
    lc.add_argument("coords", type=_number, nargs=8, metavar="COORD",
                    help="source event then target event, seconds and metres")
    lc.add_argument("speed", type=_number, nargs="?", default=None,
                    help="signal speed in m/s (default: speed of light)")
    lc.set_defaults(func=cmd_lightcone)

    rep = sub.add_parser("report", help="aggregate metrics.csv files across runs")
    rep.add_argument("files", nargs="+")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SemstackError as exc:
        print(f"semstack {args.command}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"semstack {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
