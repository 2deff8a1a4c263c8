"""Per-flow metrics report and its CSV form."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import astuple, dataclass, field
from pathlib import Path

COLUMNS = ("flow_id", "adus_sent", "adus_delivered", "bits_sent", "bits_delivered",
           "mean_latency_s", "p99_latency_s", "intact_fraction", "energy_spent_j",
           "no_route_count", "drops_buffer", "drops_energy", "degraded_intervals")

_INT_COLUMNS = {"adus_sent", "adus_delivered", "bits_sent", "bits_delivered", "no_route_count",
                "drops_buffer", "drops_energy", "degraded_intervals"}


@dataclass
class FlowRow:
    flow_id: str
    adus_sent: int = 0
    adus_delivered: int = 0
    bits_sent: int = 0
    bits_delivered: int = 0
    mean_latency_s: float = math.nan
    p99_latency_s: float = math.nan
    intact_fraction: float = math.nan
    energy_spent_j: float = 0.0
    no_route_count: int = 0
    drops_buffer: int = 0
    drops_energy: int = 0
    degraded_intervals: int = 0

    def __eq__(self, other):
        # NaN marks "no deliveries", and two such rows are equal
        if not isinstance(other, FlowRow):
            return NotImplemented
        for a, b in zip(astuple(self), astuple(other)):
            if isinstance(a, float) and isinstance(b, float) and math.isnan(a) and math.isnan(b):
                continue
            if a != b:
                return False
        return True

    def check(self) -> None:
        assert self.adus_delivered <= self.adus_sent, self
        assert self.bits_delivered <= self.bits_sent, self
        if not math.isnan(self.intact_fraction):
            assert 0.0 <= self.intact_fraction <= 1.0, self


@dataclass
class MetricsReport:
    rows: list[FlowRow] = field(default_factory=list)

    def row(self, flow_id: str) -> FlowRow:
        for r in self.rows:
            if r.flow_id == flow_id:
                return r
        raise KeyError(flow_id)


def _num(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def export_metrics(report: MetricsReport, destination=None) -> str:
    """Render ``report`` as CSV; also write it when ``destination`` is a path."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in report.rows:
        w.writerow([_num(getattr(r, c)) for c in COLUMNS])
    text = buf.getvalue()
    if destination is not None:
        path = Path(destination)
        try:
            path.write_text(text, encoding="utf-8")
        except OSError as exc:
            raise OSError(f"cannot write metrics to {path}: {exc.strerror}") from exc
    return text


def parse_metrics(text: str) -> MetricsReport:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if tuple(header or ()) != COLUMNS:
        raise ValueError(f"unexpected metrics header: {header}")
    rows = []
    for rec in reader:
        if not rec:
            continue
        vals = {}
        for col, raw in zip(COLUMNS, rec):
            if col == "flow_id":
                vals[col] = raw
            elif col in _INT_COLUMNS:
                vals[col] = int(raw)
            else:
                vals[col] = float(raw)
        rows.append(FlowRow(**vals))
    return MetricsReport(rows)


def read_metrics(path) -> MetricsReport:
    return parse_metrics(Path(path).read_text(encoding="utf-8"))
