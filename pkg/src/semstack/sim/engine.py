"""Discrete-event engine that runs a :class:`Scenario` through the full stack."""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from ..computation import (AppProfile, Encoding, PayloadSource, adapt_encoding, consume,
                           negotiate, package_adus)
from ..core import EntityId, IdAllocator, LabelConstraint, to_ps
from ..embodiment import EmbodimentSpec
from ..errors import InvariantViolation
from ..network import ContentAd, FlowSpec, NetConfig, NetworkLayer
from ..physical import LossModel, PathLimits, PhysicalLayer, Topology, fj_to_joules
from .metrics import FlowRow, MetricsReport
from .rng import StreamBank
from .scenario import Scenario
from .trace import Trace


@dataclass(frozen=True)
class Event:
    time: int  # ps
    seq: int
    kind: str
    target: Any
    handler: Callable = field(repr=False)
    payload: Any = None


@dataclass
class FlowState:
    spec: FlowSpec
    profile: AppProfile
    source: PayloadSource
    start: int  # ps
    stop: int  # ps
    tag: str = ""
    next_seq: int = 0
    adus_sent: int = 0
    bits_sent: int = 0
    degraded_intervals: int = 0
    selections: list = field(default_factory=list)  # (t_ps, encoding, degraded, offered)
    records: list = field(default_factory=list)


@dataclass
class RunResult:
    trace: Trace
    metrics: MetricsReport
    records: dict
    sim: "Simulation"

    @property
    def digest(self) -> str:
        return self.trace.digest


def _destination(cfg: dict, topo: Topology):
    (kind, value), = cfg.items()
    if kind == "node":
        return LabelConstraint.node_id(topo.by_name[value])
    if kind == "name":
        return LabelConstraint.exact_name(value)
    if kind == "prefix":
        return LabelConstraint.name_prefix(value)
    if kind == "region":
        return LabelConstraint.region(tuple(value["center"]), value["radius"], value["t"])
    return value  # content name


class Simulation:
    """One run of one scenario under one master seed."""

    def __init__(self, scenario: Scenario, seed: int | None = None, *, keep_trace: bool = True):
        self.scenario = scenario
        self.seed = scenario.seed if seed is None else seed
        self.now = 0
        self.duration = to_ps(scenario.duration)
        self._heap: list = []
        self._seq = 0
        self.trace = Trace(lambda: self.now, keep=keep_trace)
        self.streams = StreamBank(self.seed)
        self.ids = IdAllocator()
        self._build()

    # scheduling ----------------------------------------------------------------
    def schedule(self, at_ps: int, kind: str, target, handler, payload=None) -> Event:
        if at_ps < self.now:
            raise InvariantViolation(
                f"causality: {kind} for {target} scheduled at {at_ps} ps, now is {self.now} ps")
        ev = Event(int(at_ps), self._seq, kind, target, handler, payload)
        self._seq += 1
        heapq.heappush(self._heap, (ev.time, ev.seq, ev))
        return ev

    # construction ----------------------------------------------------------------
    def _build(self) -> None:
        sc = self.scenario
        topo = self.topo = Topology(self.ids)
        self.embodiments = {e.name: EmbodimentSpec(e.name, e.stability, e.malleability, e.longevity,
                                                   e.mobility, e.symbol_size_bits, e.erase_energy,
                                                   e.copyable)
                            for e in sc.embodiments}
        for n in sc.nodes:
            topo.add_node(n.name, n.position, trust=n.trust,
                          battery=None if math.isinf(n.battery) else n.battery,
                          buffer_capacity_bits=n.buffer_bits,
                          storage=self.embodiments.get(n.storage), labels=n.labels)
        for c in sc.channels:
            topo.add_channel(c.name, c.attached, self.embodiments[c.embodiment], capacity=c.capacity,
                             propagation_speed=c.propagation_speed,
                             per_bit_tx_energy=c.tx_energy_per_bit,
                             loss=LossModel(c.loss["kind"], c.loss["p"]), group=c.group,
                             reverse_ratio=c.reverse_ratio, range=c.range, plane=c.plane)
        ctl, rt = sc.control, sc.routing
        self.flood_ttl = ctl.flood_ttl or max(1, len(sc.nodes))
        cfg = NetConfig(hello_interval=to_ps(ctl.hello_interval),
                        neighbor_timeout=to_ps(ctl.neighbor_timeout),
                        lsa_refresh=to_ps(ctl.lsa_refresh), flood_ttl=self.flood_ttl,
                        forwarding_ttl=to_ps(ctl.forwarding_ttl),
                        reassembly_timeout=to_ps(rt.reassembly_timeout),
                        limits=PathLimits(rt.max_hops, rt.max_offers))
        self.phy = PhysicalLayer(topo, self, retry_limit=rt.retry_limit)
        self.net = NetworkLayer(topo, self.phy, self, cfg)
        self.net.consumer = self
        self.hello_interval = cfg.hello_interval

        self.flows: dict[EntityId, FlowState] = {}
        self._adus: dict[EntityId, tuple] = {}  # adu id -> (flow id, seq, created_at)
        for f in sc.flows:
            spec = FlowSpec(self.ids.new("flow"), topo.by_name[f.source],
                            _destination(f.destination, topo), tuple(f.weights), f.trust_policy,
                            f.deadline, f.reliability, f.priority_weight, f.tdu_bits, f.name)
            app = f.app
            if app["kind"] == "bulk":
                profile = AppProfile("bulk", total_bits=app["total_bits"])
            else:
                profile = AppProfile("streaming",
                                     encodings=tuple(Encoding(e["rate"], e["quality"])
                                                     for e in app["encodings"]),
                                     adu_interval=app["adu_interval"])
            stop = self.duration if f.stop is None else min(self.duration, to_ps(f.stop))
            # keyed by the flow's declared name so other flows never shift its stream
            state = FlowState(spec, profile, PayloadSource(self.seed, f"flow/{f.name}"),
                              to_ps(f.start), stop, f.tag)
            self.flows[spec.id] = state
            self.net.register_flow(spec)

        self.content_versions: dict[str, int] = {}
        self._setup_events()

    def _setup_events(self) -> None:
        sc = self.scenario
        for nid in sorted(self.topo.nodes):
            self.schedule(0, "tick", nid, self._on_tick, nid)
        for c in sc.content:
            self.schedule(0, "content", c.name, self._on_content, (c.name, tuple(c.holders)))
        for m in sc.mobility:
            nid = self.topo.by_name[m.node]
            self.schedule(to_ps(m.start), "move", nid, self._on_move,
                          (nid, m.speed, tuple(map(tuple, m.waypoints)), 0))
        for i, ev in enumerate(sc.events):
            self.schedule(to_ps(ev.at), ev.kind, i, self._on_scenario_event, ev)
        for fid, st in self.flows.items():
            if st.start <= self.duration:
                self.schedule(st.start, "app", fid, self._on_app, fid)

    # handlers ----------------------------------------------------------------
    def _on_tick(self, event: Event) -> None:
        nid = event.payload
        self.net.tick(nid)
        nxt = self.now + self.hello_interval
        if nxt <= self.duration:
            self.schedule(nxt, "tick", nid, self._on_tick, nid)

    def _on_content(self, event: Event) -> None:
        self._originate(*event.payload)

    def _originate(self, name: str, holders: tuple) -> None:
        version = self.content_versions.get(name, 0) + 1
        self.content_versions[name] = version
        hids = tuple(self.topo.by_name[h] for h in holders)
        ad = ContentAd(name, frozenset(hids), version, min(hids), self.flood_ttl)
        self.trace.record("content-ad", (ad.origin,), content=name, version=version,
                          holders=sorted(hids))
        self.net.originate_content(ad)

    def _on_move(self, event: Event) -> None:
        nid, speed, waypoints, idx = event.payload
        if idx >= len(waypoints):
            return
        arrive = self.phy.move_node(nid, waypoints[idx], speed)
        if idx + 1 < len(waypoints):
            self.schedule(arrive, "move", nid, self._on_move, (nid, speed, waypoints, idx + 1))

    def _on_scenario_event(self, event: Event) -> None:
        ev = event.payload
        if ev.kind == "content_update":
            self._originate(ev.content, tuple(ev.holders))
            return
        cid = self.topo.by_name[ev.channel]
        ch = self.topo.channels[cid]
        if ev.kind == "set_capacity":
            self.phy.set_capacity(cid, ev.capacity)
            return
        ch.up = ev.kind == "channel_up"
        self.trace.record("link", (cid,), up=ch.up)
        if ch.up:
            self.net._pump(cid)

    def _on_app(self, event: Event) -> None:
        st = self.flows[event.payload]
        if st.profile.kind == "bulk":
            self._send(st, package_adus(st.profile, self.now, st.source, st.spec.id, self.ids,
                                        first_seq=st.next_seq,
                                        max_adu_bits=self.scenario.routing.max_adu_bits,
                                        tag=st.tag))
            return
        contract = negotiate(self.net, st.spec, st.profile)
        sel = adapt_encoding(st.profile, contract)
        st.selections.append((self.now, sel.encoding, sel.degraded, contract.offered_capacity))
        if sel.degraded:
            st.degraded_intervals += 1
        self.trace.record("encoding", (st.spec.id,), rate=sel.encoding.rate,
                          quality=sel.encoding.quality, degraded=sel.degraded,
                          offered=contract.offered_capacity)
        self._send(st, package_adus(st.profile, self.now, st.source, st.spec.id, self.ids,
                                    first_seq=st.next_seq,
                                    max_adu_bits=self.scenario.routing.max_adu_bits,
                                    encoding=sel.encoding, tag=st.tag))
        nxt = self.now + to_ps(st.profile.adu_interval)
        if nxt < st.stop:
            self.schedule(nxt, "app", st.spec.id, self._on_app, st.spec.id)

    def _send(self, st: FlowState, adus) -> None:
        for adu in adus:
            st.next_seq = adu.seq + 1
            st.adus_sent += 1
            st.bits_sent += len(adu.payload)
            self._adus[adu.id] = (st.spec.id, adu.seq, adu.created_at)
            self.net.send_adu(st.spec, adu.id, adu.payload)

    def consume(self, node, flow_id, adu_id, payload, tags) -> None:
        """Destination application hand-off from the network layer."""
        fid, seq, created = self._adus[adu_id]
        st = self.flows[fid]
        rec = consume(adu_id, fid, seq, payload, created, self.now, st.source, tags)
        st.records.append(rec)
        self.trace.record("deliver", (node, fid, adu_id), latency=rec.latency, intact=rec.intact)

    # running -----------------------------------------------------------------
    def step(self) -> bool:
        if not self._heap or self._heap[0][0] > self.duration:
            return False
        t, _, ev = heapq.heappop(self._heap)
        if t < self.now:
            raise InvariantViolation(f"event {ev.kind} at {t} ps popped after {self.now} ps")
        self.now = t
        ev.handler(ev)
        return True

    def run(self) -> RunResult:
        while self.step():
            pass
        self.now = max(self.now, self.duration)
        self.audit_energy()
        return RunResult(self.trace, self.metrics(), {fid: st.records for fid, st in self.flows.items()},
                         self)

    def audit_energy(self) -> None:
        """Battery deltas must equal the summed logged costs, exactly."""
        for nid, node in self.topo.nodes.items():
            logged = self.phy.energy_log.get(nid, 0)
            if node.spent_fj != logged:
                raise InvariantViolation(f"{node.name}: spent {node.spent_fj} fJ, logged {logged} fJ")
            if node.initial_battery_fj is not None and node.initial_battery_fj - node.battery_fj != logged:
                raise InvariantViolation(f"{node.name}: battery delta differs from logged costs")

    def metrics(self) -> MetricsReport:
        rows = []
        for fid, st in self.flows.items():
            fc = self.net.flow_counters.get(fid, {})
            recs = st.records
            lat = np.array([r.latency for r in recs], dtype=float)
            row = FlowRow(
                flow_id=st.spec.name or str(fid),
                adus_sent=st.adus_sent, adus_delivered=len(recs),
                bits_sent=st.bits_sent, bits_delivered=sum(r.bits for r in recs),
                mean_latency_s=float(lat.mean()) if recs else math.nan,
                p99_latency_s=float(np.percentile(lat, 99)) if recs else math.nan,
                intact_fraction=(sum(r.intact for r in recs) / len(recs)) if recs else math.nan,
                energy_spent_j=fj_to_joules(self.phy.flow_energy.get(fid, 0)),
                no_route_count=fc.get("no_route", 0),
                drops_buffer=fc.get("drops_buffer", 0),
                drops_energy=fc.get("drops_energy", 0),
                degraded_intervals=st.degraded_intervals)
            row.check()
            rows.append(row)
        return MetricsReport(rows)


def run(scenario: Scenario, seed: int | None = None, *, keep_trace: bool = True) -> RunResult:
    return Simulation(scenario, seed, keep_trace=keep_trace).run()
