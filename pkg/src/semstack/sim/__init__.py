"""Discrete-event engine, scenarios, random streams, traces and metrics."""

from .rng import StreamBank, rng_for
from .trace import Trace, TraceRecord
from .metrics import COLUMNS, FlowRow, MetricsReport, export_metrics, parse_metrics

_LAZY = {
    "Simulation": "engine", "RunResult": "engine", "run": "engine",
    "Scenario": "scenario", "load_scenario": "scenario", "scenario_from_dict": "scenario",
    "load_scenario_file": "scenario",
}


def __getattr__(name):
    # engine/scenario import the layer modules, which import sim.rng
    mod = _LAZY.get(name)
    if mod is None:
        raise AttributeError(name)
    import importlib
    return getattr(importlib.import_module(f".{mod}", __name__), name)
