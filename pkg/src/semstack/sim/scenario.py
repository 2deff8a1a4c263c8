"""Scenario documents: YAML in, validated :class:`Scenario` out.

Every error names the dotted key path of the offending entry (for example
``channels[2].attached[1]``) and, when the input was text, its line.
See ``docs/scenario.md`` for the annotated format.
"""
from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from ..core import SPEED_OF_LIGHT
from ..errors import ScenarioError

_NUMERIC = re.compile(r"^[-+]?(\d+\.?\d*|\.\d+)([eE][-+]?\d+)?$")


@dataclass
class EmbodimentCfg:
    name: str
    stability: float
    malleability: float
    longevity: float = math.inf
    mobility: float = float(SPEED_OF_LIGHT)
    symbol_size_bits: int = 1
    erase_energy: float | None = None
    copyable: bool = True


@dataclass
class NodeCfg:
    name: str
    position: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    trust: str = "trusted"
    battery: float = math.inf
    buffer_bits: int = 10**9
    storage: str | None = None
    labels: list = field(default_factory=list)


@dataclass
class ChannelCfg:
    name: str
    attached: list
    embodiment: str
    capacity: float
    propagation_speed: float | None = None
    tx_energy_per_bit: float = 0.0
    loss: dict = field(default_factory=lambda: {"kind": "none", "p": 0.0})
    group: str | None = None
    reverse_ratio: float = 1.0
    range: float | None = None
    plane: str = "both"


@dataclass
class FlowCfg:
    name: str
    source: str
    destination: dict
    app: dict
    weights: list = field(default_factory=lambda: [1.0, 0.0, 0.0])
    trust_policy: str = "any"
    deadline: float | None = None
    reliability: str = "reliable"
    priority_weight: float = 1.0
    tdu_bits: int = 1024
    start: float = 3.0
    stop: float | None = None
    tag: str = ""


@dataclass
class MobilityCfg:
    node: str
    speed: float
    waypoints: list
    start: float = 0.0


@dataclass
class ContentCfg:
    name: str
    holders: list


@dataclass
class EventCfg:
    at: float
    kind: str
    channel: str | None = None
    capacity: float | None = None
    content: str | None = None
    holders: list | None = None


@dataclass
class ControlCfg:
    hello_interval: float = 1.0
    neighbor_timeout: float = 3.5
    lsa_refresh: float = 10.0
    flood_ttl: int | None = None
    forwarding_ttl: float = 5.0


@dataclass
class RoutingCfg:
    max_hops: int = 8
    max_offers: int = 16
    retry_limit: int = 16
    reassembly_timeout: float = 30.0
    max_adu_bits: int = 1 << 20


@dataclass
class Scenario:
    name: str
    duration: float
    seed: int = 0
    plane_mode: str = "unified"
    routing_mode: str = "endpoint"
    control: ControlCfg = field(default_factory=ControlCfg)
    routing: RoutingCfg = field(default_factory=RoutingCfg)
    embodiments: list = field(default_factory=list)
    nodes: list = field(default_factory=list)
    channels: list = field(default_factory=list)
    flows: list = field(default_factory=list)
    mobility: list = field(default_factory=list)
    content: list = field(default_factory=list)
    events: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def dump(self) -> str:
        """Effective configuration with every default filled in."""
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


# --- loading ----------------------------------------------------------------

def _line_map(node, path: str, out: dict) -> None:
    out.setdefault(path, node.start_mark.line + 1)
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            sub = f"{path}.{k.value}" if path else str(k.value)
            out[sub] = k.start_mark.line + 1
            _line_map(v, sub, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            _line_map(v, f"{path}[{i}]", out)


class _Reader:
    def __init__(self, lines: dict):
        self.lines = lines

    def fail(self, key: str, reason: str):
        line = self.lines.get(key)
        if line is None:
            # fall back to the nearest enclosing key we have a line for
            probe = key
            while line is None and probe:
                cut = max(probe.rfind("."), probe.rfind("["))
                probe = probe[:cut] if cut > 0 else ""
                line = self.lines.get(probe)
        raise ScenarioError(key, reason, line)

    def mapping(self, value, key: str) -> dict:
        if not isinstance(value, dict):
            self.fail(key, f"expected a mapping, got {type(value).__name__}")
        return value

    def seq(self, value, key: str) -> list:
        if value is None:
            return []
        if not isinstance(value, list):
            self.fail(key, f"expected a list, got {type(value).__name__}")
        return value

    def number(self, value, key: str, *, positive=False, nonneg=False, allow_inf=False,
               integer=False, optional=False):
        if value is None and optional:
            return None
        if isinstance(value, str) and _NUMERIC.match(value):
            # YAML 1.1 reads 1.0e9 (unsigned exponent) as a string
            value = float(value)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            self.fail(key, f"expected a number, got {value!r}")
        if isinstance(value, float) and math.isnan(value):
            self.fail(key, "NaN is not allowed")
        if math.isinf(value) and not allow_inf:
            self.fail(key, "infinity is not allowed here")
        if integer and not math.isinf(value):
            if int(value) != value:
                self.fail(key, f"expected an integer, got {value!r}")
            value = int(value)
        if positive and not value > 0:
            self.fail(key, f"must be > 0, got {value!r}")
        if nonneg and value < 0:
            self.fail(key, f"must be >= 0, got {value!r}")
        return value

    def string(self, value, key: str, *, optional=False, choices=None):
        if value is None and optional:
            return None
        if not isinstance(value, str) or not value:
            self.fail(key, f"expected a non-empty string, got {value!r}")
        if choices and value not in choices:
            self.fail(key, f"must be one of {', '.join(choices)}; got {value!r}")
        return value

    def record(self, cls, raw, key: str, required: tuple[str, ...]) -> dict:
        raw = self.mapping(raw, key)
        known = set(cls.__dataclass_fields__)
        for k in raw:
            if k not in known:
                self.fail(f"{key}.{k}" if key else str(k), "unknown key")
        for k in required:
            if k not in raw:
                self.fail(f"{key}.{k}" if key else k, "required key is missing")
        return raw


def _point(r: _Reader, value, key: str) -> list:
    value = r.seq(value, key)
    if len(value) != 3:
        r.fail(key, "expected [x, y, z]")
    return [float(r.number(v, f"{key}[{i}]")) for i, v in enumerate(value)]


def _unique(r: _Reader, items, key: str) -> dict:
    seen = {}
    for i, it in enumerate(items):
        if it.name in seen:
            r.fail(f"{key}[{i}].name", f"duplicate name {it.name!r}")
        seen[it.name] = it
    return seen


DEST_KINDS = ("node", "name", "prefix", "region", "content")
EVENT_KINDS = ("channel_down", "channel_up", "set_capacity", "content_update")


def scenario_from_dict(doc: dict, lines: dict | None = None) -> Scenario:
    r = _Reader(lines or {})
    r.record(Scenario, doc, "", ("name", "duration"))
    sc = Scenario(name=r.string(doc["name"], "name"),
                  duration=float(r.number(doc["duration"], "duration", positive=True)))
    seed = r.number(doc.get("seed", 0), "seed", nonneg=True, integer=True)
    if seed >= 2**64:
        r.fail("seed", "must fit in an unsigned 64-bit integer")
    sc.seed = seed
    sc.plane_mode = r.string(doc.get("plane_mode", "unified"), "plane_mode",
                             choices=("unified", "split"))
    sc.routing_mode = r.string(doc.get("routing_mode", "endpoint"), "routing_mode",
                               choices=("endpoint", "information"))

    ctl = r.record(ControlCfg, doc.get("control") or {}, "control", ())
    sc.control = ControlCfg(
        hello_interval=float(r.number(ctl.get("hello_interval", 1.0), "control.hello_interval", positive=True)),
        neighbor_timeout=float(r.number(ctl.get("neighbor_timeout", 3.5), "control.neighbor_timeout", positive=True)),
        lsa_refresh=float(r.number(ctl.get("lsa_refresh", 10.0), "control.lsa_refresh", positive=True)),
        flood_ttl=r.number(ctl.get("flood_ttl"), "control.flood_ttl", positive=True, integer=True, optional=True),
        forwarding_ttl=float(r.number(ctl.get("forwarding_ttl", 5.0), "control.forwarding_ttl", nonneg=True)),
    )
    rt = r.record(RoutingCfg, doc.get("routing") or {}, "routing", ())
    d = RoutingCfg()
    sc.routing = RoutingCfg(**{
        k: (r.number(rt.get(k, getattr(d, k)), f"routing.{k}", positive=True, integer=True)
            if k != "reassembly_timeout"
            else float(r.number(rt.get(k, d.reassembly_timeout), f"routing.{k}", positive=True)))
        for k in RoutingCfg.__dataclass_fields__})

    for i, raw in enumerate(r.seq(doc.get("embodiments"), "embodiments")):
        k = f"embodiments[{i}]"
        r.record(EmbodimentCfg, raw, k, ("name", "stability", "malleability"))
        sc.embodiments.append(EmbodimentCfg(
            name=r.string(raw["name"], f"{k}.name"),
            stability=float(r.number(raw["stability"], f"{k}.stability", positive=True)),
            malleability=float(r.number(raw["malleability"], f"{k}.malleability", positive=True)),
            longevity=float(r.number(raw.get("longevity", math.inf), f"{k}.longevity",
                                     positive=True, allow_inf=True)),
            mobility=float(r.number(raw.get("mobility", SPEED_OF_LIGHT), f"{k}.mobility", positive=True)),
            symbol_size_bits=r.number(raw.get("symbol_size_bits", 1), f"{k}.symbol_size_bits",
                                      positive=True, integer=True),
            erase_energy=r.number(raw.get("erase_energy"), f"{k}.erase_energy", nonneg=True, optional=True),
            copyable=bool(raw.get("copyable", True)),
        ))
        if sc.embodiments[-1].mobility > SPEED_OF_LIGHT:
            r.fail(f"{k}.mobility", "exceeds the speed of light")
    embodiments = _unique(r, sc.embodiments, "embodiments")

    for i, raw in enumerate(r.seq(doc.get("nodes"), "nodes")):
        k = f"nodes[{i}]"
        r.record(NodeCfg, raw, k, ("name",))
        storage = r.string(raw.get("storage"), f"{k}.storage", optional=True)
        if storage is not None and storage not in embodiments:
            r.fail(f"{k}.storage", f"unknown embodiment {storage!r}")
        labels = [r.string(v, f"{k}.labels[{j}]") for j, v in
                  enumerate(r.seq(raw.get("labels"), f"{k}.labels"))]
        sc.nodes.append(NodeCfg(
            name=r.string(raw["name"], f"{k}.name"),
            position=_point(r, raw.get("position", [0, 0, 0]), f"{k}.position"),
            trust=r.string(raw.get("trust", "trusted"), f"{k}.trust", choices=("trusted", "untrusted")),
            battery=float(r.number(raw.get("battery", math.inf), f"{k}.battery", nonneg=True, allow_inf=True)),
            buffer_bits=r.number(raw.get("buffer_bits", 10**9), f"{k}.buffer_bits", nonneg=True, integer=True),
            storage=storage, labels=labels))
    nodes = _unique(r, sc.nodes, "nodes")

    for i, raw in enumerate(r.seq(doc.get("channels"), "channels")):
        k = f"channels[{i}]"
        r.record(ChannelCfg, raw, k, ("name", "attached", "embodiment", "capacity"))
        attached = r.seq(raw["attached"], f"{k}.attached")
        for j, a in enumerate(attached):
            if a not in nodes:
                r.fail(f"{k}.attached[{j}]", f"unknown node {a!r}")
        if len(set(attached)) < 2:
            r.fail(f"{k}.attached", "a channel needs at least two distinct nodes")
        emb = r.string(raw["embodiment"], f"{k}.embodiment")
        if emb not in embodiments:
            r.fail(f"{k}.embodiment", f"unknown embodiment {emb!r}")
        speed_cap = min(SPEED_OF_LIGHT, embodiments[emb].mobility)
        speed = r.number(raw.get("propagation_speed"), f"{k}.propagation_speed",
                         positive=True, optional=True)
        if speed is None:
            speed = float(speed_cap)
        elif speed > speed_cap:
            r.fail(f"{k}.propagation_speed", f"exceeds min(c, embodiment mobility) = {speed_cap}")
        loss = r.mapping(raw.get("loss", {"kind": "none"}), f"{k}.loss")
        for lk in loss:
            if lk not in ("kind", "p"):
                r.fail(f"{k}.loss.{lk}", "unknown key")
        lkind = r.string(loss.get("kind", "none"), f"{k}.loss.kind", choices=("none", "bsc", "bec"))
        lp = float(r.number(loss.get("p", 0.0), f"{k}.loss.p", nonneg=True))
        if lp > 1:
            r.fail(f"{k}.loss.p", "probability exceeds 1")
        rr = float(r.number(raw.get("reverse_ratio", 1.0), f"{k}.reverse_ratio", positive=True))
        if rr > 1:
            r.fail(f"{k}.reverse_ratio", "must be <= 1")
        plane = r.string(raw.get("plane", "both"), f"{k}.plane", choices=("both", "data", "control"))
        if sc.plane_mode == "unified" and plane != "both":
            r.fail(f"{k}.plane", "unified plane mode requires plane: both")
        sc.channels.append(ChannelCfg(
            name=r.string(raw["name"], f"{k}.name"), attached=list(attached), embodiment=emb,
            capacity=float(r.number(raw["capacity"], f"{k}.capacity", positive=True)),
            propagation_speed=float(speed),
            tx_energy_per_bit=float(r.number(raw.get("tx_energy_per_bit", 0.0),
                                             f"{k}.tx_energy_per_bit", nonneg=True)),
            loss={"kind": lkind, "p": lp},
            group=r.string(raw.get("group"), f"{k}.group", optional=True),
            reverse_ratio=rr,
            range=(None if raw.get("range") is None
                   else float(r.number(raw["range"], f"{k}.range", nonneg=True))),
            plane=plane))
    channels = _unique(r, sc.channels, "channels")
    names = set(nodes) | set(channels) | set(embodiments)
    if len(names) != len(nodes) + len(channels) + len(embodiments):
        r.fail("channels", "node, channel and embodiment names must be distinct")

    for i, raw in enumerate(r.seq(doc.get("flows"), "flows")):
        k = f"flows[{i}]"
        r.record(FlowCfg, raw, k, ("name", "source", "destination", "app"))
        src = r.string(raw["source"], f"{k}.source")
        if src not in nodes:
            r.fail(f"{k}.source", f"unknown node {src!r}")
        dest = _destination(r, raw["destination"], f"{k}.destination", nodes, sc)
        weights = r.seq(raw.get("weights", [1, 0, 0]), f"{k}.weights")
        if len(weights) != 3:
            r.fail(f"{k}.weights", "expected [w_time, w_energy, w_space]")
        weights = [float(r.number(w, f"{k}.weights[{j}]", nonneg=True)) for j, w in enumerate(weights)]
        if sum(weights) <= 0:
            r.fail(f"{k}.weights", "at least one weight must be positive")
        app = _app(r, raw["app"], f"{k}.app")
        start = float(r.number(raw.get("start", 3.0), f"{k}.start", nonneg=True))
        stop = r.number(raw.get("stop"), f"{k}.stop", nonneg=True, optional=True)
        if stop is not None and stop < start:
            r.fail(f"{k}.stop", "stop precedes start")
        sc.flows.append(FlowCfg(
            name=r.string(raw["name"], f"{k}.name"), source=src, destination=dest, app=app,
            weights=weights,
            trust_policy=r.string(raw.get("trust_policy", "any"), f"{k}.trust_policy",
                                  choices=("any", "trusted-only")),
            deadline=(None if raw.get("deadline") is None
                      else float(r.number(raw["deadline"], f"{k}.deadline", positive=True))),
            reliability=r.string(raw.get("reliability", "reliable"), f"{k}.reliability",
                                 choices=("reliable", "best-effort")),
            priority_weight=float(r.number(raw.get("priority_weight", 1.0), f"{k}.priority_weight",
                                           positive=True)),
            tdu_bits=r.number(raw.get("tdu_bits", 1024), f"{k}.tdu_bits", positive=True, integer=True),
            start=start, stop=None if stop is None else float(stop),
            tag=str(raw.get("tag", ""))))
        if app["kind"] == "streaming":
            biggest = max(e["rate"] for e in app["encodings"]) * app["adu_interval"]
            if round(biggest) > sc.routing.max_adu_bits:
                r.fail(f"{k}.app.encodings", "largest encoding's ADU exceeds routing.max_adu_bits")
    _unique(r, sc.flows, "flows")

    for i, raw in enumerate(r.seq(doc.get("mobility"), "mobility")):
        k = f"mobility[{i}]"
        r.record(MobilityCfg, raw, k, ("node", "speed", "waypoints"))
        if raw["node"] not in nodes:
            r.fail(f"{k}.node", f"unknown node {raw['node']!r}")
        speed = float(r.number(raw["speed"], f"{k}.speed", positive=True))
        if speed > SPEED_OF_LIGHT:
            r.fail(f"{k}.speed", "exceeds the speed of light")
        wps = [_point(r, w, f"{k}.waypoints[{j}]") for j, w in
               enumerate(r.seq(raw["waypoints"], f"{k}.waypoints"))]
        sc.mobility.append(MobilityCfg(raw["node"], speed, wps,
                                       float(r.number(raw.get("start", 0.0), f"{k}.start", nonneg=True))))

    for i, raw in enumerate(r.seq(doc.get("content"), "content")):
        k = f"content[{i}]"
        r.record(ContentCfg, raw, k, ("name", "holders"))
        holders = _node_list(r, raw["holders"], f"{k}.holders", nodes)
        sc.content.append(ContentCfg(r.string(raw["name"], f"{k}.name"), holders))
    contents = _unique(r, sc.content, "content")
    for i, f in enumerate(sc.flows):
        if "content" in f.destination and f.destination["content"] not in contents:
            r.fail(f"flows[{i}].destination.content", f"unknown content {f.destination['content']!r}")

    for i, raw in enumerate(r.seq(doc.get("events"), "events")):
        k = f"events[{i}]"
        r.record(EventCfg, raw, k, ("at", "kind"))
        ev = EventCfg(at=float(r.number(raw["at"], f"{k}.at", nonneg=True)),
                      kind=r.string(raw["kind"], f"{k}.kind", choices=EVENT_KINDS))
        if ev.kind in ("channel_down", "channel_up", "set_capacity"):
            ev.channel = r.string(raw.get("channel"), f"{k}.channel")
            if ev.channel not in channels:
                r.fail(f"{k}.channel", f"unknown channel {ev.channel!r}")
        if ev.kind == "set_capacity":
            ev.capacity = float(r.number(raw.get("capacity"), f"{k}.capacity", positive=True))
        if ev.kind == "content_update":
            ev.content = r.string(raw.get("content"), f"{k}.content")
            if ev.content not in contents:
                r.fail(f"{k}.content", f"unknown content {ev.content!r}")
            ev.holders = _node_list(r, raw.get("holders"), f"{k}.holders", nodes)
        sc.events.append(ev)
    return sc


def _node_list(r: _Reader, value, key: str, nodes: dict) -> list:
    value = r.seq(value, key)
    if not value:
        r.fail(key, "needs at least one node")
    for j, h in enumerate(value):
        if h not in nodes:
            r.fail(f"{key}[{j}]", f"unknown node {h!r}")
    return list(value)


def _destination(r: _Reader, raw, key: str, nodes: dict, sc: Scenario) -> dict:
    raw = r.mapping(raw, key)
    if len(raw) != 1:
        r.fail(key, f"give exactly one of {', '.join(DEST_KINDS)}")
    (kind, value), = raw.items()
    if kind not in DEST_KINDS:
        r.fail(f"{key}.{kind}", "unknown destination kind")
    if kind == "node":
        if value not in nodes:
            r.fail(f"{key}.node", f"unknown node {value!r}")
        return {"node": value}
    if kind == "region":
        reg = r.mapping(value, f"{key}.region")
        for rk in reg:
            if rk not in ("center", "radius", "t"):
                r.fail(f"{key}.region.{rk}", "unknown key")
        return {"region": {
            "center": _point(r, reg.get("center"), f"{key}.region.center"),
            "radius": float(r.number(reg.get("radius"), f"{key}.region.radius", nonneg=True)),
            "t": float(r.number(reg.get("t", 0.0), f"{key}.region.t", nonneg=True))}}
    if kind == "content" and sc.routing_mode != "information":
        r.fail(f"{key}.content", "content destinations need routing_mode: information")
    return {kind: r.string(value, f"{key}.{kind}")}


def _app(r: _Reader, raw, key: str) -> dict:
    raw = r.mapping(raw, key)
    kind = r.string(raw.get("kind"), f"{key}.kind", choices=("bulk", "streaming"))
    allowed = {"bulk": ("kind", "total_bits"), "streaming": ("kind", "encodings", "adu_interval")}[kind]
    for ak in raw:
        if ak not in allowed:
            r.fail(f"{key}.{ak}", f"unknown key for a {kind} app")
    if kind == "bulk":
        return {"kind": "bulk",
                "total_bits": r.number(raw.get("total_bits"), f"{key}.total_bits", nonneg=True, integer=True)}
    encs = []
    for j, e in enumerate(r.seq(raw.get("encodings"), f"{key}.encodings")):
        e = r.mapping(e, f"{key}.encodings[{j}]")
        encs.append({"rate": float(r.number(e.get("rate"), f"{key}.encodings[{j}].rate", positive=True)),
                     "quality": r.number(e.get("quality"), f"{key}.encodings[{j}].quality", integer=True)})
    if not encs:
        r.fail(f"{key}.encodings", "needs at least one encoding")
    for j in range(1, len(encs)):
        if not (encs[j - 1]["rate"] < encs[j]["rate"] and encs[j - 1]["quality"] < encs[j]["quality"]):
            r.fail(f"{key}.encodings[{j}]", "encodings must ascend in both rate and quality")
    return {"kind": "streaming", "encodings": encs,
            "adu_interval": float(r.number(raw.get("adu_interval", 0.1), f"{key}.adu_interval", positive=True))}


def load_scenario(document: str | dict) -> Scenario:
    """Parse and validate a scenario from YAML text (or an already-parsed dict)."""
    if isinstance(document, dict):
        return scenario_from_dict(document)
    loader = yaml.SafeLoader(document)
    try:
        node = loader.get_single_node()
        if node is None:
            raise ScenarioError("<document>", "empty scenario document", 1)
        data = loader.construct_document(node)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        line = mark.line + 1 if mark else None
        raise ScenarioError("<document>", f"parse error: {exc.problem}", line) from exc
    finally:
        loader.dispose()
    lines: dict = {}
    _line_map(node, "", lines)
    if not isinstance(data, dict):
        raise ScenarioError("<document>", "top level must be a mapping", 1)
    return scenario_from_dict(data, lines)


def load_scenario_file(path) -> Scenario:
    return load_scenario(Path(path).read_text(encoding="utf-8"))
