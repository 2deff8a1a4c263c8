"""Physical Transportation layer.

The pure half of this module (ETX/ETT estimates, :func:`negotiate_paths`,
:func:`effective_capacity`) works on a :class:`Topology` snapshot. The
stateful half, :class:`PhysicalLayer`, runs inside the simulation engine:
it moves nodes, serialises frames onto channels with processor-sharing
inside entanglement groups, applies channel loss, and hands received frames
up to the network layer.

Energy is booked in integer femtojoules so that per-node conservation can be
checked exactly.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterable, NamedTuple, Protocol

import numpy as np

from .core import (PS_PER_SECOND, SPEED_OF_LIGHT, EntityId, IdAllocator, Label, LabelConstraint,
                   SpaceTimePoint, ceil_ps, exact, light_cone_reachable, ps_to_seconds,
                   resolve)
from .embodiment import EmbodimentSpec, SymbolBlock, bec_distort, bsc_distort, decay
from .errors import (BufferOverflowError, EnergyExhaustedError, UnreachableLinkError,
                     ValidationError)

FJ_PER_JOULE = 10**15


def joules_to_fj(joules: float) -> int:
    return round(exact(joules) * FJ_PER_JOULE)


def fj_to_joules(fj: int) -> float:
    return fj / FJ_PER_JOULE


@dataclass(frozen=True)
class LossModel:
    kind: str = "none"
    p: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "bsc", "bec"):
            raise ValidationError(f"loss kind must be none, bsc or bec, not {self.kind!r}")
        if not 0.0 <= self.p <= 1.0:
            raise ValidationError(f"loss probability must lie in [0, 1], got {self.p}")

    def apply(self, block: SymbolBlock, rng: np.random.Generator) -> SymbolBlock:
        if self.kind == "bsc":
            return bsc_distort(block, self.p, rng)
        if self.kind == "bec":
            return bec_distort(block, self.p, rng)
        return block


# --- link estimates ---------------------------------------------------------

def estimate_etx(forward_ratio: float, reverse_ratio: float = 1.0) -> float:
    """Expected transmission count for a link with the given delivery ratios."""
    for name, r in (("forward", forward_ratio), ("reverse", reverse_ratio)):
        if r <= 0:
            raise UnreachableLinkError(f"{name} delivery ratio is zero")
        if r > 1:
            raise ValidationError(f"{name} delivery ratio {r} exceeds 1")
    return 1.0 / (forward_ratio * reverse_ratio)


def estimate_ett(etx: float, size: float, capacity: float) -> float:
    """Expected transmission time in seconds: etx * size / capacity."""
    if not capacity > 0:
        raise ValidationError(f"capacity must be positive, got {capacity}")
    if etx < 1:
        raise ValidationError(f"etx must be >= 1, got {etx}")
    if size < 0:
        raise ValidationError("size must be non-negative")
    return etx * size / capacity


def delivery_probability(loss: LossModel, tdu_size_bits: int) -> float:
    """Probability that a whole TDU crosses the channel unharmed."""
    if loss.kind == "none" or loss.p == 0.0 or tdu_size_bits == 0:
        return 1.0
    if loss.p == 1.0:
        return 0.0
    return math.exp(tdu_size_bits * math.log1p(-loss.p))


def etx_from_loss(loss: LossModel, tdu_size_bits: int) -> float:
    q = delivery_probability(loss, tdu_size_bits)
    if q == 0.0:
        raise UnreachableLinkError(
            f"{loss.kind} p={loss.p}: a {tdu_size_bits}-bit TDU never gets through")
    return estimate_etx(q, 1.0)


# --- topology ---------------------------------------------------------------

@dataclass
class Node:
    id: EntityId
    name: str
    position: SpaceTimePoint
    trust: str = "trusted"
    battery_fj: int | None = None  # None: unlimited
    buffer_capacity_bits: int = 10**9
    storage: EmbodimentSpec | None = None
    labels: tuple[Label, ...] = ()
    initial_battery_fj: int | None = None
    spent_fj: int = 0
    buffer: dict = field(default_factory=dict)  # tdu id -> (Tdu, stored_at_ps)
    buffer_bits: int = 0
    motion: tuple | None = None  # (t0_ps, p0, t1_ps, p1)

    def __post_init__(self):
        if self.trust not in ("trusted", "untrusted"):
            raise ValidationError(f"node {self.name}: trust must be trusted or untrusted")
        if self.battery_fj is not None and self.battery_fj < 0:
            raise ValidationError(f"node {self.name}: battery must be non-negative")
        if self.initial_battery_fj is None:
            self.initial_battery_fj = self.battery_fj

    @property
    def trusted(self) -> bool:
        return self.trust == "trusted"

    def position_at(self, t_ps: int) -> tuple[float, float, float]:
        if self.motion is None:
            return self.position.position
        t0, p0, t1, p1 = self.motion
        if t_ps >= t1 or t1 == t0:
            return p1
        if t_ps <= t0:
            return p0
        f = (t_ps - t0) / (t1 - t0)
        return tuple(a + (b - a) * f for a, b in zip(p0, p1))

    def point_at(self, t_ps: int) -> SpaceTimePoint:
        return SpaceTimePoint(ps_to_seconds(t_ps), *self.position_at(t_ps))


@dataclass
class Channel:
    id: EntityId
    name: str
    attached: tuple[EntityId, ...]
    embodiment: EmbodimentSpec
    capacity: float
    propagation_speed: float
    per_bit_tx_energy: float = 0.0
    loss: LossModel = LossModel()
    group: str | None = None
    reverse_ratio: float = 1.0
    range: float | None = None
    plane: str = "both"  # both | data | control
    up: bool = True

    def __post_init__(self):
        if len(set(self.attached)) < 2:
            raise ValidationError(f"channel {self.name}: needs at least two distinct nodes")
        if not self.capacity > 0:
            raise ValidationError(f"channel {self.name}: capacity must be positive")
        if not 0 < self.propagation_speed <= min(SPEED_OF_LIGHT, self.embodiment.mobility):
            raise ValidationError(
                f"channel {self.name}: propagation speed must be in (0, min(c, mobility)]")
        if self.per_bit_tx_energy < 0:
            raise ValidationError(f"channel {self.name}: per-bit energy must be >= 0")
        if not 0 < self.reverse_ratio <= 1:
            raise ValidationError(f"channel {self.name}: reverse_ratio must be in (0, 1]")
        if self.range is not None and self.range < 0:
            raise ValidationError(f"channel {self.name}: range must be >= 0")
        if self.plane not in ("both", "data", "control"):
            raise ValidationError(f"channel {self.name}: plane must be both, data or control")
        self.attached = tuple(sorted(self.attached))

    @property
    def tx_energy_fj_per_bit(self) -> int:
        return joules_to_fj(self.per_bit_tx_energy)

    def carries(self, plane: str) -> bool:
        return self.plane == "both" or self.plane == plane


class Hop(NamedTuple):
    src: EntityId
    channel: EntityId
    dst: EntityId

    @property
    def key(self):
        return (self.src.serial, self.channel.serial, self.dst.serial)


@dataclass(frozen=True)
class PathMetrics:
    expected_time: float
    expected_energy: float
    space_footprint: int
    etx_sum: float


@dataclass(frozen=True)
class PathOffer:
    id: EntityId
    hops: tuple[Hop, ...]
    metrics: PathMetrics
    groups: frozenset

    @property
    def nodes(self) -> tuple[EntityId, ...]:
        return (self.hops[0].src,) + tuple(h.dst for h in self.hops)

    @property
    def source(self) -> EntityId:
        return self.hops[0].src

    @property
    def destination(self) -> EntityId:
        return self.hops[-1].dst

    def __len__(self):
        return len(self.hops)


class PathLimits(NamedTuple):
    max_hops: int = 8
    max_offers: int = 16
    tdu_size_bits: int = 1024


class Topology:
    """Nodes and channels plus the path-identity registry."""

    def __init__(self, ids: IdAllocator | None = None):
        self.ids = ids or IdAllocator()
        self.nodes: dict[EntityId, Node] = {}
        self.channels: dict[EntityId, Channel] = {}
        self.by_name: dict[str, EntityId] = {}
        self._paths: dict[tuple[Hop, ...], EntityId] = {}

    # construction helpers, mostly for tests and scenario loading
    def add_node(self, name: str, position=(0.0, 0.0, 0.0), *, trust="trusted",
                 battery: float | None = None, buffer_capacity_bits: int = 10**9,
                 storage: EmbodimentSpec | None = None, labels: Iterable[str] = ()) -> EntityId:
        nid = self.ids.new("node")
        lbls = (Label.name(name), Label.address(nid)) + tuple(Label.name(s) for s in labels)
        fj = None if battery is None or math.isinf(battery) else joules_to_fj(battery)
        self.nodes[nid] = Node(nid, name, SpaceTimePoint(0.0, *map(float, position)), trust,
                               fj, buffer_capacity_bits, storage, lbls)
        self.by_name[name] = nid
        return nid

    def add_channel(self, name: str, attached: Iterable, embodiment: EmbodimentSpec, *,
                    capacity: float, propagation_speed: float = SPEED_OF_LIGHT,
                    per_bit_tx_energy: float = 0.0, loss: LossModel | None = None,
                    group: str | None = None, reverse_ratio: float = 1.0,
                    range: float | None = None, plane: str = "both") -> EntityId:
        cid = self.ids.new("channel")
        att = tuple(self.by_name[a] if isinstance(a, str) else a for a in attached)
        for a in att:
            if a not in self.nodes:
                raise ValidationError(f"channel {name}: unknown node {a}")
        self.channels[cid] = Channel(cid, name, att, embodiment, capacity, propagation_speed,
                                     per_bit_tx_energy, loss or LossModel(), group,
                                     reverse_ratio, range, plane)
        self.by_name[name] = cid
        return cid

    def node(self, ref) -> Node:
        return self.nodes[self.by_name[ref] if isinstance(ref, str) else ref]

    def channel(self, ref) -> Channel:
        return self.channels[self.by_name[ref] if isinstance(ref, str) else ref]

    def label_registry(self) -> dict[EntityId, tuple[Label, ...]]:
        return {nid: n.labels for nid, n in self.nodes.items()}

    def locator(self):
        def locate(nid: EntityId, t: float) -> SpaceTimePoint:
            return self.nodes[nid].point_at(round(t * 10**12))
        return locate

    def usable(self, ch: Channel, now_ps: int) -> bool:
        if not ch.up:
            return False
        if ch.range is None:
            return True
        pts = [self.nodes[n].position_at(now_ps) for n in ch.attached]
        return all(math.dist(a, b) <= ch.range
                   for i, a in enumerate(pts) for b in pts[i + 1:])

    def links(self, now_ps: int, plane: str = "data") -> list[Hop]:
        """Every usable directed (src, channel, dst) link, sorted."""
        out = []
        for cid in sorted(self.channels):
            ch = self.channels[cid]
            if not ch.carries(plane) or not self.usable(ch, now_ps):
                continue
            for a in ch.attached:
                for b in ch.attached:
                    if a != b:
                        out.append(Hop(a, cid, b))
        return sorted(out)

    def path_id(self, hops: tuple[Hop, ...]) -> EntityId | None:
        return self._paths.get(hops)

    def register_paths(self, hop_seqs: Iterable[tuple[Hop, ...]]) -> None:
        """Assign path ids to unseen hop sequences in canonical order."""
        fresh = sorted({h for h in hop_seqs if h not in self._paths},
                       key=lambda seq: tuple(hop.key for hop in seq))
        for seq in fresh:
            self._paths[seq] = self.ids.new("path")

    def hop_metrics(self, hop: Hop, tdu_size_bits: int, now_ps: int):
        """(etx, expected_time, expected_energy, propagation_delay) for one hop."""
        ch = self.channels[hop.channel]
        etx = etx_from_loss(ch.loss, tdu_size_bits) / ch.reverse_ratio
        dist = math.dist(self.nodes[hop.src].position_at(now_ps),
                         self.nodes[hop.dst].position_at(now_ps))
        prop = dist / ch.propagation_speed
        time = estimate_ett(etx, tdu_size_bits, ch.capacity) + prop
        energy = ch.per_bit_tx_energy * tdu_size_bits * etx
        return etx, time, energy, prop

    def make_offer(self, hops: tuple[Hop, ...], tdu_size_bits: int, now_ps: int) -> PathOffer:
        etxs, times, energies = [], [], []
        heard: set[EntityId] = set()
        groups = set()
        for hop in hops:
            etx, t, e, _ = self.hop_metrics(hop, tdu_size_bits, now_ps)
            etxs.append(etx)
            times.append(t)
            energies.append(e)
            ch = self.channels[hop.channel]
            heard.update(ch.attached)
            if ch.group is not None:
                groups.add(ch.group)
        # fsum is exact-then-rounded, so equal multisets of hop costs tie exactly
        metrics = PathMetrics(math.fsum(times), math.fsum(energies), len(heard), math.fsum(etxs))
        if self.path_id(hops) is None:
            self.register_paths([hops])
        return PathOffer(self.path_id(hops), hops, metrics, frozenset(groups))


def negotiate_paths(topology: Topology, source: EntityId, constraint: LabelConstraint,
                    limits: PathLimits = PathLimits(), now_ps: int = 0,
                    links: Iterable[Hop] | None = None) -> list[PathOffer]:
    """Ranked simple-path offers from ``source`` to every node matching ``constraint``.

    ``links`` restricts the search to a subset of usable links (a node's
    link-state view); by default every usable data link is eligible.
    """
    if source not in topology.nodes:
        raise ValidationError(f"unknown source node {source}")
    if limits.max_hops < 1 or limits.max_offers < 1:
        raise ValidationError("max_hops and max_offers must be >= 1")
    allowed = topology.links(now_ps, "data")
    if links is not None:
        allowed = sorted(set(allowed) & set(links))
    out_links: dict[EntityId, list[Hop]] = {}
    for hop in allowed:
        ch = topology.channels[hop.channel]
        try:
            etx_from_loss(ch.loss, limits.tdu_size_bits)
        except UnreachableLinkError:
            continue
        out_links.setdefault(hop.src, []).append(hop)

    targets = set(resolve(constraint, topology.label_registry(), topology.locator()))
    targets.discard(source)
    if not targets:
        return []

    found: list[tuple[Hop, ...]] = []
    stack: list[Hop] = []
    on_path = {source}

    def walk(at: EntityId) -> None:
        for hop in out_links.get(at, ()):
            if hop.dst in on_path:
                continue
            stack.append(hop)
            if hop.dst in targets:
                found.append(tuple(stack))
            if len(stack) < limits.max_hops:
                on_path.add(hop.dst)
                walk(hop.dst)
                on_path.discard(hop.dst)
            stack.pop()

    walk(source)
    topology.register_paths(found)
    offers = [topology.make_offer(hops, limits.tdu_size_bits, now_ps) for hops in found]
    offers.sort(key=lambda o: (o.metrics.expected_time, o.id))
    return offers[:limits.max_offers]


def effective_capacity(topology: Topology, channel: EntityId,
                       group_members_active: Iterable[EntityId] = ()) -> float:
    """Nominal capacity divided by the number of busy channels in its group."""
    ch = topology.channels[channel]
    if ch.group is None:
        return ch.capacity
    busy = {c for c in group_members_active if topology.channels[c].group == ch.group}
    busy.add(channel)
    return ch.capacity / len(busy)


# --- frames -----------------------------------------------------------------

@dataclass(frozen=True)
class SourceRoute:
    """Path header carried by every data TDU."""

    path: EntityId
    hops: tuple[Hop, ...]
    next_index: int = 0
    hop_limit: int = 0

    def advanced(self) -> "SourceRoute":
        return replace(self, next_index=self.next_index + 1, hop_limit=self.hop_limit - 1)


@dataclass(frozen=True, eq=False)
class Tdu:
    id: EntityId
    adu: EntityId
    index: int
    count: int
    payload: SymbolBlock
    physical_tags: dict = field(default_factory=dict)
    flow: EntityId | None = None
    header: SourceRoute | None = None
    reliable: bool = True

    def __post_init__(self):
        if not 0 <= self.index < self.count:
            raise ValidationError(f"fragment index {self.index} outside [0, {self.count})")

    @property
    def size_bits(self) -> int:
        return len(self.payload)

    @property
    def order_key(self):
        return (1, self.id.serial)

    def replace(self, **changes) -> "Tdu":
        return replace(self, **changes)


@dataclass(frozen=True, eq=False)
class ControlFrame:
    serial: int
    kind: str
    origin: EntityId
    body: bytes
    message: object = None

    @property
    def size_bits(self) -> int:
        return 8 * len(self.body)

    @property
    def order_key(self):
        return (0, self.serial)


# --- stateful layer ---------------------------------------------------------

class Engine(Protocol):
    now: int

    def schedule(self, at_ps: int, kind: str, target, handler, payload=None): ...


@dataclass
class _Transmission:
    node: EntityId
    channel: EntityId
    frame: object
    intended: EntityId | None
    bits: int
    remaining: float
    start_ps: int
    attempt: int = 1
    rate: float = 0.0
    last_ps: int = 0
    generation: int = 0


class PhysicalLayer:
    """Engine-resident physical state: transmissions, motion, buffers, delivery."""

    def __init__(self, topology: Topology, engine, *, retry_limit: int = 16):
        self.topo = topology
        self.engine = engine
        self.retry_limit = retry_limit
        self.upper = None  # network layer: receive(), transmit_done(), channel_idle()
        self.active: dict[EntityId, _Transmission] = {}
        # layer-wide so a stale completion never matches a later transmission
        self._generations = itertools.count(1)
        self.inbox: dict[EntityId, list] = {}
        self._drain_pending: set[EntityId] = set()
        self.energy_log: dict[EntityId, int] = {nid: 0 for nid in topology.nodes}
        self.flow_energy: dict[EntityId, int] = {}
        self.counters: dict[str, int] = {}

    # energy -----------------------------------------------------------------
    def _debit(self, node: Node, fj: int, reason: str, flow: EntityId | None = None) -> None:
        if node.battery_fj is not None:
            if fj > node.battery_fj:
                raise EnergyExhaustedError(node.id, fj, node.battery_fj)
            node.battery_fj -= fj
        node.spent_fj += fj
        self.energy_log[node.id] = self.energy_log.get(node.id, 0) + fj
        if flow is not None:
            self.flow_energy[flow] = self.flow_energy.get(flow, 0) + fj
        if fj:
            self.engine.trace.record("energy", (node.id,) + ((flow,) if flow else ()),
                                     fj=fj, reason=reason)

    def charge_copy(self, node_id: EntityId, embodiment: EmbodimentSpec, bits: int,
                    flow: EntityId | None = None) -> None:
        from .embodiment import copy_cost
        self._debit(self.topo.nodes[node_id], joules_to_fj(copy_cost(embodiment, bits)),
                    "copy", flow)

    def _count(self, key: str) -> None:
        self.counters[key] = self.counters.get(key, 0) + 1

    # motion -----------------------------------------------------------------
    def move_node(self, node_id: EntityId, waypoint, speed: float) -> int:
        """Start moving toward ``waypoint``; returns the arrival time in ps."""
        if not 0 < speed <= SPEED_OF_LIGHT:
            raise ValidationError(f"speed must be in (0, c], got {speed}")
        node = self.topo.nodes[node_id]
        now = self.engine.now
        here = node.position_at(now)
        target = tuple(float(v) for v in (waypoint.position if isinstance(waypoint, SpaceTimePoint)
                                           else waypoint))
        arrive = now + ceil_ps(Fraction(math.dist(here, target)) / Fraction(speed))
        node.position = SpaceTimePoint(ps_to_seconds(now), *here)
        node.motion = (now, here, arrive, target)
        self.engine.trace.record("move", (node_id,), to=list(target), arrive_ps=arrive)
        return arrive

    # buffers ----------------------------------------------------------------
    def store_tdu(self, node_id: EntityId, tdu: Tdu) -> None:
        node = self.topo.nodes[node_id]
        if node.buffer_bits + tdu.size_bits > node.buffer_capacity_bits:
            raise BufferOverflowError(f"{node.name}: buffer full")
        node.buffer[tdu.id] = (tdu, self.engine.now)
        node.buffer_bits += tdu.size_bits
        self.engine.trace.record("store", (node_id, tdu.id) + ((tdu.flow,) if tdu.flow else ()),
                                 bits=tdu.size_bits)

    def release_tdu(self, node_id: EntityId, tdu_id: EntityId) -> Tdu:
        """Take a TDU out of storage, applying decay and paying the erase cost."""
        node = self.topo.nodes[node_id]
        tdu, stored_at = node.buffer[tdu_id]
        cost = 0
        if node.storage is not None:
            cost = joules_to_fj(node.storage.erase_energy_per_bit * tdu.size_bits)
        self._debit(node, cost, "erase", tdu.flow)
        del node.buffer[tdu_id]
        node.buffer_bits -= tdu.size_bits
        if node.storage is not None:
            held = ps_to_seconds(self.engine.now - stored_at)
            rng = self.engine.streams.get("decay", node.name)
            tdu = tdu.replace(payload=decay(tdu.payload, held, node.storage.longevity, rng))
        self.engine.trace.record("release", (node_id, tdu_id), erased=tdu.payload.erased_count)
        return tdu

    def discard_tdu(self, node_id: EntityId, tdu_id: EntityId) -> None:
        node = self.topo.nodes[node_id]
        tdu, _ = node.buffer.pop(tdu_id)
        node.buffer_bits -= tdu.size_bits

    # transmission -----------------------------------------------------------
    def channel_busy(self, channel: EntityId) -> bool:
        return channel in self.active

    def transmit(self, node_id: EntityId, channel_id: EntityId, frame,
                 intended: EntityId | None = None) -> None:
        """Serialise ``frame`` from ``node_id`` onto ``channel_id``.

        Raises :class:`EnergyExhaustedError` if the first attempt cannot be
        paid for; later retries that run out of energy are reported through
        ``upper.transmit_done``.
        """
        ch = self.topo.channels[channel_id]
        if node_id not in ch.attached:
            raise ValidationError(f"node {node_id} is not attached to channel {ch.name}")
        if channel_id in self.active:
            raise ValidationError(f"channel {ch.name} is busy")
        node = self.topo.nodes[node_id]
        flow = getattr(frame, "flow", None)
        self._debit(node, ch.tx_energy_fj_per_bit * frame.size_bits, "tx", flow)
        now = self.engine.now
        tx = _Transmission(node_id, channel_id, frame, intended, frame.size_bits,
                           float(frame.size_bits), now, last_ps=now)
        self._start(tx)

    def set_capacity(self, channel_id: EntityId, capacity: float) -> None:
        """Change a channel's nominal capacity, re-rating any transmission in flight."""
        if not capacity > 0:
            raise ValidationError(f"capacity must be positive, got {capacity}")
        ch = self.topo.channels[channel_id]
        self._settle(ch.group, channel_id)
        ch.capacity = capacity
        self.engine.trace.record("capacity", (channel_id,), capacity=capacity)
        if self._group_members(ch.group, channel_id):
            self._reschedule(ch.group, channel_id)

    def _start(self, tx: _Transmission) -> None:
        ch = self.topo.channels[tx.channel]
        ids = (tx.node, tx.channel) + ((tx.frame.id,) if isinstance(tx.frame, Tdu) else ())
        self.engine.trace.record("tx", ids, bits=tx.bits, attempt=tx.attempt,
                                 frame=getattr(tx.frame, "kind", "data"))
        self._settle(ch.group)
        self.active[tx.channel] = tx
        self._reschedule(ch.group, tx.channel)

    def _group_members(self, group, channel=None) -> list[_Transmission]:
        if group is None:
            return [self.active[channel]] if channel in self.active else []
        return [t for c, t in sorted(self.active.items())
                if self.topo.channels[c].group == group]

    def _settle(self, group, channel=None) -> None:
        # book progress at the current rates up to now
        now = self.engine.now
        for t in self._group_members(group, channel):
            t.remaining = max(0.0, t.remaining - t.rate * (now - t.last_ps) / 10**12)
            t.last_ps = now

    def _reschedule(self, group, channel) -> None:
        now = self.engine.now
        members = self._group_members(group, channel)
        busy = [t.channel for t in members]
        for t in members:
            rate = effective_capacity(self.topo, t.channel, busy)
            t.generation = next(self._generations)
            if rate != t.rate:
                t.rate = rate
                self.engine.trace.record("rate", (t.channel,), rate=rate,
                                         remaining=t.remaining)
            done = now + ceil_ps(Fraction(t.remaining) / Fraction(rate))
            self.engine.schedule(done, "tx-end", t.channel, self._on_tx_end,
                                 (t.channel, t.generation))

    def _on_tx_end(self, event) -> None:
        channel_id, generation = event.payload
        tx = self.active.get(channel_id)
        if tx is None or tx.generation != generation:
            return
        ch = self.topo.channels[channel_id]
        self._settle(ch.group, channel_id)
        tx.remaining = 0.0
        del self.active[channel_id]
        self.engine.trace.record("tx-end", (tx.node, channel_id), bits=tx.bits)
        self._reschedule(ch.group, channel_id)
        self._finish_attempt(tx, ch)

    def _finish_attempt(self, tx: _Transmission, ch: Channel) -> None:
        now = self.engine.now
        rng = self.engine.streams.get("loss", ch.name)
        receivers = [n for n in ch.attached if n != tx.node]
        frame = tx.frame
        if isinstance(frame, ControlFrame):
            q = delivery_probability(ch.loss, frame.size_bits)
            for r in receivers:
                if q >= 1.0 or rng.random() < q:
                    self._schedule_delivery(tx, ch, r, frame)
                else:
                    self._count("control_lost")
            self.upper.transmit_done(tx.node, ch.id, frame, "sent")
            return
        copies = {r: frame.payload if ch.loss.kind == "none" else ch.loss.apply(frame.payload, rng)
                  for r in receivers}
        ok = True
        if tx.intended is not None and frame.reliable:
            got = copies[tx.intended]
            ok = got.erased_count == 0 and bool(np.array_equal(got.bits, frame.payload.bits))
        if not ok:
            if tx.attempt < self.retry_limit and ch.up:
                node = self.topo.nodes[tx.node]
                try:
                    self._debit(node, ch.tx_energy_fj_per_bit * tx.bits, "tx", frame.flow)
                except EnergyExhaustedError:
                    self.upper.transmit_done(tx.node, ch.id, frame, "energy")
                    return
                retry = _Transmission(tx.node, tx.channel, frame, tx.intended, tx.bits,
                                      float(tx.bits), now, tx.attempt + 1, last_ps=now)
                self._start(retry)
                return
            self.engine.trace.record("tx-fail", (tx.node, ch.id, frame.id), attempts=tx.attempt)
            self.upper.transmit_done(tx.node, ch.id, frame, "retry_exhausted")
            return
        tags = dict(frame.physical_tags)
        tags.update(embodiment=ch.embodiment.name, channel=ch.name)
        for r in receivers:
            self._schedule_delivery(tx, ch, r, frame.replace(payload=copies[r], physical_tags=tags))
        self.upper.transmit_done(tx.node, ch.id, frame, "sent")

    def _schedule_delivery(self, tx: _Transmission, ch: Channel, receiver: EntityId, frame) -> None:
        now = self.engine.now
        sender = self.topo.nodes[tx.node]
        rnode = self.topo.nodes[receiver]
        # exact times so the cone test here and any post-hoc audit agree
        send_pt = SpaceTimePoint(Fraction(now, PS_PER_SECOND), *sender.position_at(now))
        speed = ch.propagation_speed
        at = now + ceil_ps(Fraction(math.dist(send_pt.position, rnode.position_at(now)))
                           / Fraction(speed))
        # a moving receiver is caught by iterating on its position at arrival
        for _ in range(64):
            arrive_pt = SpaceTimePoint(Fraction(at, PS_PER_SECOND), *rnode.position_at(at))
            if light_cone_reachable(send_pt, arrive_pt, speed):
                break
            dist = math.dist(send_pt.position, rnode.position_at(at))
            at = max(at + 1, now + ceil_ps(Fraction(dist) / Fraction(speed)))
        else:
            raise AssertionError("delivery time failed to converge inside the light cone")
        self.engine.schedule(at, "deliver", receiver, self._on_deliver,
                             (receiver, frame, tx.node, ch.id, now, send_pt.position))

    def _on_deliver(self, event) -> None:
        receiver, frame, sender, channel_id, send_ps, send_pos = event.payload
        rnode = self.topo.nodes[receiver]
        ids = (sender, receiver, channel_id) + ((frame.id,) if isinstance(frame, Tdu) else ())
        if isinstance(frame, Tdu) and frame.flow is not None:
            ids += (frame.flow,)
        self.engine.trace.record(
            "rx", ids, frame=getattr(frame, "kind", "data"), send_ps=send_ps,
            send_pos=list(send_pos), recv_pos=list(rnode.position_at(self.engine.now)),
            speed=self.topo.channels[channel_id].propagation_speed)
        self.deliver_up(receiver, frame, channel_id)

    def deliver_up(self, node_id: EntityId, frame, channel_id: EntityId | None = None) -> None:
        """Queue ``frame`` for the node's network layer; same-time arrivals go by id."""
        self.inbox.setdefault(node_id, []).append((self.engine.now, frame.order_key, frame,
                                                   channel_id))
        if node_id not in self._drain_pending:
            self._drain_pending.add(node_id)
            self.engine.schedule(self.engine.now, "drain", node_id, self._drain, node_id)

    def _drain(self, event) -> None:
        node_id = event.payload
        self._drain_pending.discard(node_id)
        items = sorted(self.inbox.pop(node_id, []), key=lambda e: (e[0], e[1]))
        for _, _, frame, channel_id in items:
            self.upper.receive(node_id, frame, channel_id)
