"""Network layer: topology control, flow control, multiplexing, fragmentation.

Physical negotiation enumerates candidate paths, the network layer filters
them (trust, deadline), and flow control picks one. The pick is written into
every TDU as a :class:`~semstack.physical.SourceRoute`, so intermediate nodes
forward by header alone.
"""
from __future__ import annotations

import math
import struct
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, NamedTuple

import numpy as np

from .core import EntityId, IdAllocator, LabelConstraint, to_ps
from .embodiment import SymbolBlock
from .errors import (BufferOverflowError, ContractViolation, EnergyExhaustedError,
                     NoRouteError, ProtocolError, UnreachableLinkError, ValidationError)
from .physical import (ControlFrame, Hop, PathLimits, PathOffer, SourceRoute, Tdu,
                       Topology, effective_capacity, etx_from_loss, negotiate_paths)


@dataclass(frozen=True)
class FlowSpec:
    id: EntityId
    source: EntityId
    destination: LabelConstraint | str  # a str names a piece of content
    weights: tuple[float, float, float] = (1.0, 0.0, 0.0)
    trust_policy: str = "any"
    deadline: float | None = None
    reliability: str = "reliable"
    priority_weight: float = 1.0
    tdu_bits: int = 1024
    name: str = ""

    def __post_init__(self):
        w = tuple(float(x) for x in self.weights)
        if len(w) != 3 or any(x < 0 for x in w) or sum(w) <= 0:
            raise ValidationError("weights must be three non-negative numbers, not all zero")
        object.__setattr__(self, "weights", w)
        if self.trust_policy not in ("any", "trusted-only"):
            raise ValidationError("trust_policy must be any or trusted-only")
        if self.reliability not in ("reliable", "best-effort"):
            raise ValidationError("reliability must be reliable or best-effort")
        if not self.priority_weight > 0:
            raise ValidationError("priority_weight must be positive")
        if self.tdu_bits < 1:
            raise ValidationError("tdu_bits must be >= 1")

    @property
    def content_centric(self) -> bool:
        return isinstance(self.destination, str)

    @property
    def cache_key(self):
        return (str(self.destination), self.weights, self.trust_policy, self.deadline,
                self.tdu_bits)


# --- fragmentation ----------------------------------------------------------

def fragment(adu_payload, adu_id: EntityId, tdu_size_bits: int,
             ids: IdAllocator | None = None, **tdu_fields) -> list[Tdu]:
    """Split an ADU payload into ceil(len / tdu_size_bits) TDUs (at least one)."""
    if tdu_size_bits < 1:
        raise ValidationError("tdu_size_bits must be >= 1")
    block = adu_payload if isinstance(adu_payload, SymbolBlock) else SymbolBlock.from_bits(adu_payload)
    ids = ids or IdAllocator()
    n = len(block)
    count = max(1, -(-n // tdu_size_bits))
    out = []
    for i in range(count):
        lo, hi = i * tdu_size_bits, min(n, (i + 1) * tdu_size_bits)
        piece = SymbolBlock(block.bits[lo:hi], block.erasures[lo:hi], block.embodiment)
        out.append(Tdu(ids.new("tdu"), adu_id, i, count, piece, **tdu_fields))
    return out


@dataclass
class ReassemblyState:
    adu: EntityId
    count: int
    first_seen: int  # ps
    timeout: int = to_ps(30)  # ps
    received: dict = field(default_factory=dict)
    tags: dict = field(default_factory=dict)

    def expired(self, now_ps: int) -> bool:
        return now_ps > self.first_seen + self.timeout


class Reassembly(NamedTuple):
    status: str  # pending | complete | expired | distorted
    payload: SymbolBlock | None = None


def reassemble(state: ReassemblyState, tdu: Tdu, now_ps: int,
               reliable: bool = True) -> Reassembly:
    if tdu.adu != state.adu:
        raise ValidationError(f"fragment of {tdu.adu} offered to reassembly of {state.adu}")
    if tdu.count != state.count:
        raise ProtocolError(f"{state.adu}: fragment claims {tdu.count} parts, expected {state.count}")
    if state.expired(now_ps):
        return Reassembly("expired")
    if reliable and tdu.payload.erased_count:
        return Reassembly("distorted")
    state.received.setdefault(tdu.index, tdu)
    state.tags.update(tdu.physical_tags)
    if len(state.received) < state.count:
        return Reassembly("pending")
    parts = [state.received[i].payload for i in range(state.count)]
    bits = np.concatenate([p.bits for p in parts])
    mask = np.concatenate([p.erasures for p in parts])
    return Reassembly("complete", SymbolBlock(bits, mask))


# --- topology databases -----------------------------------------------------

@dataclass(frozen=True)
class LinkStateAdvert:
    origin: EntityId
    seq: int
    links: tuple  # ((channel, neighbor, etx), ...)
    ttl: int = 16


class LinkStateDatabase:
    """Per-node view of advertised links, keyed by origin."""

    def __init__(self):
        self.entries: dict[EntityId, LinkStateAdvert] = {}
        self.version = 0

    def apply(self, lsa: LinkStateAdvert) -> bool:
        """Install ``lsa`` if it is newer than what we hold; returns True if it was."""
        cur = self.entries.get(lsa.origin)
        if cur is not None and lsa.seq <= cur.seq:
            return False
        changed = cur is None or cur.links != lsa.links
        self.entries[lsa.origin] = lsa
        if changed:
            self.version += 1
        return True

    def hops(self) -> set[Hop]:
        return {Hop(o, ch, nb) for o, lsa in self.entries.items() for ch, nb, _ in lsa.links}

    def nodes(self) -> set[EntityId]:
        out = set(self.entries)
        for lsa in self.entries.values():
            out.update(nb for _, nb, _ in lsa.links)
        return out


@dataclass(frozen=True)
class ContentAd:
    content_name: str
    holders: frozenset
    version: int
    origin: EntityId | None = None
    ttl: int = 16

    def __post_init__(self):
        if not self.holders:
            raise ValidationError(f"content ad for {self.content_name!r} has no holders")
        object.__setattr__(self, "holders", frozenset(self.holders))


class ContentTable:
    def __init__(self):
        self.entries: dict[str, ContentAd] = {}
        self.version = 0

    def apply(self, ad: ContentAd) -> bool:
        cur = self.entries.get(ad.content_name)
        if cur is not None and ad.version <= cur.version:
            return False
        self.entries[ad.content_name] = ad
        self.version += 1
        return True

    def holders(self, name: str) -> list[EntityId]:
        ad = self.entries.get(name)
        return sorted(ad.holders) if ad else []


# --- control-plane wire format ----------------------------------------------
# All integers little-endian. Header: u8 kind, u8 version, u16 ttl, u64 origin.

WIRE_VERSION = 1
KIND_CODES = {"hello": 1, "link-state": 2, "content-ad": 3,
              "contract-request": 4, "contract-response": 5}
CODE_KINDS = {v: k for k, v in KIND_CODES.items()}
_HEADER = struct.Struct("<BBHQ")


@dataclass(frozen=True)
class Hello:
    origin: EntityId
    round: int


@dataclass(frozen=True)
class ContractRequest:
    origin: EntityId
    flow: EntityId


@dataclass(frozen=True)
class ContractResponse:
    origin: EntityId
    flow: EntityId
    admitted: bool
    offered_capacity: float
    offered_latency: float


class UnknownControl(NamedTuple):
    code: int
    body: bytes


def encode_control(msg) -> bytes:
    if isinstance(msg, Hello):
        return _HEADER.pack(1, WIRE_VERSION, 1, msg.origin.serial) + struct.pack("<I", msg.round)
    if isinstance(msg, LinkStateAdvert):
        body = struct.pack("<QI", msg.seq, len(msg.links))
        body += b"".join(struct.pack("<QQd", ch.serial, nb.serial, etx) for ch, nb, etx in msg.links)
        return _HEADER.pack(2, WIRE_VERSION, msg.ttl, msg.origin.serial) + body
    if isinstance(msg, ContentAd):
        name = msg.content_name.encode("utf-8")
        body = struct.pack("<QH", msg.version, len(name)) + name
        holders = sorted(msg.holders)
        body += struct.pack("<I", len(holders)) + b"".join(struct.pack("<Q", h.serial) for h in holders)
        origin = msg.origin.serial if msg.origin is not None else 0
        return _HEADER.pack(3, WIRE_VERSION, msg.ttl, origin) + body
    if isinstance(msg, ContractRequest):
        return _HEADER.pack(4, WIRE_VERSION, 1, msg.origin.serial) + struct.pack("<Q", msg.flow.serial)
    if isinstance(msg, ContractResponse):
        return (_HEADER.pack(5, WIRE_VERSION, 1, msg.origin.serial)
                + struct.pack("<QBdd", msg.flow.serial, int(msg.admitted),
                              msg.offered_capacity, msg.offered_latency))
    raise ValidationError(f"cannot encode {type(msg).__name__}")


def decode_control(data: bytes):
    code, version, ttl, origin = _HEADER.unpack_from(data)
    if version != WIRE_VERSION:
        raise ProtocolError(f"unsupported control wire version {version}")
    node = EntityId("node", origin)
    off = _HEADER.size
    if code == 1:
        (rnd,) = struct.unpack_from("<I", data, off)
        return Hello(node, rnd)
    if code == 2:
        seq, n = struct.unpack_from("<QI", data, off)
        off += 12
        links = []
        for _ in range(n):
            ch, nb, etx = struct.unpack_from("<QQd", data, off)
            off += 24
            links.append((EntityId("channel", ch), EntityId("node", nb), etx))
        return LinkStateAdvert(node, seq, tuple(links), ttl)
    if code == 3:
        ver, nlen = struct.unpack_from("<QH", data, off)
        off += 10
        name = data[off:off + nlen].decode("utf-8")
        off += nlen
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        holders = [EntityId("node", s) for s in struct.unpack_from(f"<{n}Q", data, off)]
        return ContentAd(name, frozenset(holders), ver, node, ttl)
    if code == 4:
        (flow,) = struct.unpack_from("<Q", data, off)
        return ContractRequest(node, EntityId("flow", flow))
    if code == 5:
        flow, adm, cap, lat = struct.unpack_from("<QBdd", data, off)
        return ContractResponse(node, EntityId("flow", flow), bool(adm), cap, lat)
    return UnknownControl(code, bytes(data))


# --- flow control -----------------------------------------------------------

def flow_select_path(candidates: Iterable[PathOffer], weights) -> PathOffer:
    """Weighted argmin over per-set normalised time, energy and footprint."""
    cands = list(candidates)
    if not cands:
        raise ContractViolation("flow_select_path needs at least one candidate")
    wt, we, ws = weights
    metrics = [(o.metrics.expected_time, o.metrics.expected_energy, o.metrics.space_footprint)
               for o in cands]
    tops = [max(col) for col in zip(*metrics)]

    def norm(v, top):
        return v / top if top > 0 else 0.0

    def cost(i):
        t, e, s = metrics[i]
        return wt * norm(t, tops[0]) + we * norm(e, tops[1]) + ws * norm(s, tops[2])

    best = min(range(len(cands)), key=lambda i: (cost(i), cands[i].id))
    return cands[best]


# --- multiplexing -----------------------------------------------------------

class DeficitRoundRobin:
    """Deficit round robin over per-client FIFO queues.

    ``quantum`` is the per-round credit for each client, in bits. New
    clients join the back of the round; clients present at construction
    are ordered by id.
    """

    def __init__(self):
        self.queues: dict = {}
        self.quantum: dict = {}
        self.deficit: dict = {}
        self.order: deque = deque()
        self._fresh = True

    def push(self, client, item, size: int, quantum: float) -> None:
        q = self.queues.get(client)
        if q is None:
            q = self.queues[client] = deque()
        self.quantum[client] = quantum
        if not q:
            self.order.append(client)
            self.deficit.setdefault(client, 0.0)
        q.append((size, item))

    def __len__(self):
        return sum(len(q) for q in self.queues.values())

    def peek_size(self):
        if not self.order:
            return None
        return self.queues[self.order[0]][0][0]

    def pop(self, limit: float | None = None):
        """Next (client, item, size), or None if empty or the next grant exceeds ``limit``."""
        while self.order:
            client = self.order[0]
            if self._fresh:
                self.deficit[client] += self.quantum[client]
                self._fresh = False
            q = self.queues[client]
            size, item = q[0]
            if size <= self.deficit[client]:
                if limit is not None and size > limit:
                    return None
                self.deficit[client] -= size
                q.popleft()
                if not q:
                    self.deficit[client] = 0.0
                    self.order.popleft()
                    self._fresh = True
                return client, item, size
            self.order.rotate(-1)
            self._fresh = True
        return None


class Client(NamedTuple):
    flow: EntityId
    priority_weight: float
    backlog: int


def multiplex_allocate(clients: Iterable[Client], resource: int, mode: str = "part-time",
                       tdu_bits: int = 1024, scheduler: DeficitRoundRobin | None = None) -> dict:
    """Share ``resource`` bits among clients for one round.

    part-time grants whole TDUs by deficit round robin (pass the same
    ``scheduler`` across rounds to carry deficits over); subdivided splits
    the resource in proportion to weight, flooring to whole bits and handing
    leftover bits to the largest fractional remainders.
    """
    clients = sorted((Client(*c) for c in clients), key=lambda c: c.flow)
    if resource < 0:
        raise ValidationError("resource must be non-negative")
    for c in clients:
        if not c.priority_weight > 0:
            raise ValidationError(f"{c.flow}: weight must be positive")
    alloc = {c.flow: 0 for c in clients}
    if mode == "subdivided":
        total_w = sum(Fraction(c.priority_weight) for c in clients)
        if not clients:
            return alloc
        exact = {c.flow: resource * Fraction(c.priority_weight) / total_w for c in clients}
        for c in clients:
            alloc[c.flow] = min(c.backlog, math.floor(exact[c.flow]))
        left = resource - sum(alloc.values())
        # largest remainder first keeps every share within one bit of exact
        order = sorted(clients, key=lambda c: (-(exact[c.flow] - math.floor(exact[c.flow])), c.flow))
        for c in order:
            if left <= 0:
                break
            extra = min(left, c.backlog - alloc[c.flow], 1)
            alloc[c.flow] += extra
            left -= extra
        for c in clients:
            if left <= 0:
                break
            extra = min(left, c.backlog - alloc[c.flow])
            alloc[c.flow] += extra
            left -= extra
        return alloc
    if mode != "part-time":
        raise ValidationError(f"mode must be part-time or subdivided, not {mode!r}")
    drr = scheduler if scheduler is not None else DeficitRoundRobin()
    for c in clients:
        queued = sum(size for size, _ in drr.queues.get(c.flow, ()))
        need = c.backlog - queued
        while need > 0:
            size = min(tdu_bits, need)
            drr.push(c.flow, None, size, c.priority_weight * tdu_bits)
            need -= size
    left = resource
    while True:
        got = drr.pop(limit=left)
        if got is None:
            break
        flow, _, size = got
        alloc[flow] = alloc.get(flow, 0) + size
        left -= size
    return alloc


# --- engine-resident layer --------------------------------------------------

@dataclass
class ForwardingEntry:
    key: tuple
    offers: tuple
    computed_at: int  # ps
    ttl: int  # ps
    db_version: tuple

    def fresh(self, now_ps: int, db_version) -> bool:
        return now_ps <= self.computed_at + self.ttl and db_version == self.db_version


@dataclass
class NodeNet:
    node: EntityId
    lsdb: LinkStateDatabase = field(default_factory=LinkStateDatabase)
    content: ContentTable = field(default_factory=ContentTable)
    neighbors: dict = field(default_factory=dict)  # (channel, neighbor) -> last seen ps
    cache: dict = field(default_factory=dict)
    reassembly: dict = field(default_factory=dict)
    delivered: set = field(default_factory=set)
    lsa_seq: int = 0
    advertised: tuple | None = None
    advertised_at: int = -1
    hello_round: int = 0
    contracts: dict = field(default_factory=dict)
    flood_hops: dict = field(default_factory=dict)  # content name -> hops travelled


@dataclass
class NetConfig:
    hello_interval: int = to_ps(1)
    neighbor_timeout: int = to_ps("3.5")
    lsa_refresh: int = to_ps(10)
    flood_ttl: int = 16
    forwarding_ttl: int = to_ps(5)
    reassembly_timeout: int = to_ps(30)
    limits: PathLimits = PathLimits()
    etx_probe_bits: int = 1024


class NetworkLayer:
    """Per-node network state plus the shared channel multiplexers."""

    def __init__(self, topology: Topology, physical, engine, config: NetConfig | None = None):
        self.topo = topology
        self.phy = physical
        self.engine = engine
        self.cfg = config or NetConfig()
        self.state = {nid: NodeNet(nid) for nid in sorted(topology.nodes)}
        self.queues: dict[EntityId, tuple[deque, DeficitRoundRobin]] = {}
        self.flows: dict[EntityId, FlowSpec] = {}
        self.flow_paths: dict[EntityId, PathOffer] = {}
        self.negotiations = 0
        self.counters: dict[str, int] = {}
        self.flow_counters: dict[EntityId, dict[str, int]] = {}
        self.consumer = None  # computation layer: consume(node, flow, adu, payload, tags)
        self._frame_serial = 0
        physical.upper = self

    def _count(self, key: str, flow: EntityId | None = None) -> None:
        self.counters[key] = self.counters.get(key, 0) + 1
        if flow is not None:
            fc = self.flow_counters.setdefault(flow, {})
            fc[key] = fc.get(key, 0) + 1

    def register_flow(self, flow: FlowSpec) -> None:
        self.flows[flow.id] = flow

    # control plane -----------------------------------------------------------
    def _control_channels(self, node: EntityId, exclude: EntityId | None = None) -> list[EntityId]:
        now = self.engine.now
        return [cid for cid in sorted(self.topo.channels)
                if cid != exclude and node in self.topo.channels[cid].attached
                and self.topo.channels[cid].carries("control")
                and self.topo.usable(self.topo.channels[cid], now)]

    def send_control(self, node: EntityId, msg, exclude: EntityId | None = None) -> None:
        body = encode_control(msg)
        kind = CODE_KINDS.get(body[0], "unknown")
        for cid in self._control_channels(node, exclude):
            self._frame_serial += 1
            frame = ControlFrame(self._frame_serial, kind, node, body, msg)
            self._enqueue_control(cid, node, frame)

    def observations(self, node: EntityId) -> tuple:
        """Links this node can vouch for right now: (channel, neighbor, etx)."""
        st = self.state[node]
        now = self.engine.now
        heard = {nb for (_, nb), seen in st.neighbors.items()
                 if now - seen <= self.cfg.neighbor_timeout}
        out = []
        for cid in sorted(self.topo.channels):
            ch = self.topo.channels[cid]
            if node not in ch.attached or not ch.carries("data") or not self.topo.usable(ch, now):
                continue
            try:
                etx = etx_from_loss(ch.loss, self.cfg.etx_probe_bits) / ch.reverse_ratio
            except UnreachableLinkError:
                continue
            for nb in ch.attached:
                if nb != node and nb in heard:
                    out.append((cid, nb, etx))
        return tuple(out)

    def topology_update_endpoint(self, node: EntityId, observations: tuple | None = None):
        """Originate a new link-state advert if our links changed or the refresh is due."""
        st = self.state[node]
        obs = self.observations(node) if observations is None else tuple(observations)
        now = self.engine.now
        due = st.advertised_at < 0 or now - st.advertised_at >= self.cfg.lsa_refresh
        if obs == st.advertised and not due:
            return None
        st.lsa_seq += 1
        lsa = LinkStateAdvert(node, st.lsa_seq, obs, self.cfg.flood_ttl)
        st.advertised, st.advertised_at = obs, now
        st.lsdb.apply(lsa)
        self.send_control(node, lsa)
        return lsa

    def topology_update_content(self, node: EntityId, ad: ContentAd, hops: int = 0) -> bool:
        st = self.state[node]
        if st.content.apply(ad):
            st.flood_hops[ad.content_name] = hops
            return True
        return False

    def originate_content(self, ad: ContentAd) -> None:
        self.topology_update_content(ad.origin, ad)
        self.send_control(ad.origin, ad)

    def tick(self, node: EntityId) -> None:
        st = self.state[node]
        now = self.engine.now
        for key, seen in list(st.neighbors.items()):
            if now - seen > self.cfg.neighbor_timeout:
                del st.neighbors[key]
        self.topology_update_endpoint(node)
        st.hello_round += 1
        self.send_control(node, Hello(node, st.hello_round))

    def handle_control(self, node: EntityId, frame: ControlFrame, channel: EntityId | None):
        st = self.state[node]
        now = self.engine.now
        msg = frame.message if frame.message is not None else decode_control(frame.body)
        if isinstance(msg, UnknownControl):
            self._count("control_unknown")
            return None
        if isinstance(msg, Hello):
            st.neighbors[(channel, msg.origin)] = now
            return ("neighbor", msg.origin)
        if isinstance(msg, LinkStateAdvert):
            if msg.origin == node or not st.lsdb.apply(msg):
                return None
            if msg.ttl > 1:
                self.send_control(node, LinkStateAdvert(msg.origin, msg.seq, msg.links, msg.ttl - 1),
                                  exclude=channel)
            return ("lsa", msg.origin, msg.seq)
        if isinstance(msg, ContentAd):
            hops = self.cfg.flood_ttl - msg.ttl + 1
            if not self.topology_update_content(node, msg, hops):
                return None
            if msg.ttl > 1:
                self.send_control(node, ContentAd(msg.content_name, msg.holders, msg.version,
                                                  msg.origin, msg.ttl - 1), exclude=channel)
            return ("content", msg.content_name, msg.version)
        if isinstance(msg, ContractRequest):
            st.contracts[msg.flow] = ("requested", msg.origin, now)
            return ("contract-request", msg.flow)
        if isinstance(msg, ContractResponse):
            st.contracts[msg.flow] = msg
            return ("contract-response", msg.flow)
        self._count("control_unknown")
        return None

    # topology control / flow control ----------------------------------------
    def db_version(self, node: EntityId) -> tuple:
        st = self.state[node]
        return (st.lsdb.version, st.content.version)

    def _destination(self, node: EntityId, flow: FlowSpec) -> LabelConstraint | None:
        st = self.state[node]
        if flow.content_centric:
            holders = st.content.holders(flow.destination)
            if not holders:
                return None
            return LabelConstraint.any_of(LabelConstraint.node_id(h) for h in holders)
        return flow.destination

    def candidate_paths(self, node: EntityId, flow: FlowSpec) -> list[PathOffer]:
        st = self.state[node]
        now = self.engine.now
        version = self.db_version(node)
        entry = st.cache.get(flow.cache_key)
        if entry is not None and entry.fresh(now, version):
            offers = list(entry.offers)
        else:
            offers = self._fresh_candidates(node, flow, now)
            st.cache[flow.cache_key] = ForwardingEntry(flow.cache_key, tuple(offers), now,
                                                       self.cfg.forwarding_ttl, version)
        if not offers:
            raise NoRouteError(f"{flow.name or flow.id}: no admissible path from {node}")
        return offers

    def _fresh_candidates(self, node: EntityId, flow: FlowSpec, now: int) -> list[PathOffer]:
        self.negotiations += 1
        dest = self._destination(node, flow)
        if dest is None:
            return []
        st = self.state[node]
        limits = self.cfg.limits._replace(tdu_size_bits=flow.tdu_bits)
        offers = negotiate_paths(self.topo, node, dest, limits, now, links=st.lsdb.hops())
        if flow.trust_policy == "trusted-only":
            offers = [o for o in offers if self.path_trusted(o)]
        if flow.deadline is not None:
            offers = [o for o in offers if o.metrics.expected_time <= flow.deadline]
        return offers

    def path_trusted(self, offer: PathOffer) -> bool:
        """True if every node able to hear any hop is trusted."""
        for hop in offer.hops:
            for n in self.topo.channels[hop.channel].attached:
                if not self.topo.nodes[n].trusted:
                    return False
        return True

    # data plane --------------------------------------------------------------
    def send_adu(self, flow: FlowSpec, adu_id: EntityId, payload: SymbolBlock) -> PathOffer | None:
        """Route, fragment and launch one ADU; returns the chosen path or None on no-route."""
        try:
            offers = self.candidate_paths(flow.source, flow)
        except NoRouteError:
            self._count("no_route", flow.id)
            self.engine.trace.record("no-route", (flow.source, flow.id, adu_id))
            return None
        offer = flow_select_path(offers, flow.weights)
        self.flow_paths[flow.id] = offer
        route = SourceRoute(offer.id, offer.hops, 0, len(offer.hops))
        tdus = fragment(payload, adu_id, flow.tdu_bits, self.topo.ids, flow=flow.id,
                        header=route, reliable=flow.reliability == "reliable")
        self.engine.trace.record("send", (flow.source, flow.id, adu_id, offer.id),
                                 bits=len(payload), fragments=len(tdus))
        for tdu in tdus:
            self.forward(flow.source, tdu)
        return offer

    def forward(self, node: EntityId, tdu: Tdu) -> str:
        route = tdu.header
        if route is None:
            self._count("drop_no_header", tdu.flow)
            return "dropped"
        if route.next_index >= len(route.hops):
            self._terminal(node, tdu)
            return "terminal"
        if route.hop_limit <= 0:
            self._count("drop_hop_limit", tdu.flow)
            self.engine.trace.record("drop", (node, tdu.id), reason="hop-limit")
            return "dropped"
        hop = route.hops[route.next_index]
        if hop.src != node:
            self._count("drop_misrouted", tdu.flow)
            self.engine.trace.record("drop", (node, tdu.id), reason="misrouted")
            return "dropped"
        try:
            self.phy.store_tdu(node, tdu)
        except BufferOverflowError:
            self._count("drops_buffer", tdu.flow)
            self.engine.trace.record("drop", (node, tdu.id), reason="buffer")
            return "dropped"
        flow = self.flows.get(tdu.flow)
        weight = flow.priority_weight if flow else 1.0
        quantum = weight * (flow.tdu_bits if flow else max(1, tdu.size_bits))
        _, drr = self._queue(hop.channel)
        drr.push(tdu.flow, (node, tdu.id, hop), tdu.size_bits, quantum)
        self._pump(hop.channel)
        return "queued"

    def _terminal(self, node: EntityId, tdu: Tdu) -> None:
        st = self.state[node]
        if tdu.adu in st.delivered:
            self._count("duplicate", tdu.flow)
            return
        rs = st.reassembly.get(tdu.adu)
        now = self.engine.now
        if rs is None:
            rs = st.reassembly[tdu.adu] = ReassemblyState(tdu.adu, tdu.count, now,
                                                          self.cfg.reassembly_timeout)
            self.engine.schedule(now + rs.timeout + 1, "reassembly-timeout", node,
                                 self._on_reassembly_timeout, (node, tdu.adu, tdu.flow))
        try:
            out = reassemble(rs, tdu, now, reliable=tdu.reliable)
        except ProtocolError:
            self._count("protocol_error", tdu.flow)
            del st.reassembly[tdu.adu]
            return
        if out.status == "pending":
            return
        del st.reassembly[tdu.adu]
        if out.status == "complete":
            st.delivered.add(tdu.adu)
            self.engine.trace.record("reassembled", (node, tdu.adu) + ((tdu.flow,) if tdu.flow else ()),
                                     bits=len(out.payload))
            if self.consumer is not None:
                self.consumer.consume(node, tdu.flow, tdu.adu, out.payload, dict(rs.tags))
        else:
            self._count(out.status, tdu.flow)
            self.engine.trace.record("drop", (node, tdu.adu), reason=out.status)

    def _on_reassembly_timeout(self, event) -> None:
        node, adu, flow = event.payload
        st = self.state[node]
        rs = st.reassembly.get(adu)
        if rs is not None and rs.expired(self.engine.now):
            del st.reassembly[adu]
            self._count("expired", flow)
            self.engine.trace.record("drop", (node, adu), reason="expired")

    def receive(self, node: EntityId, frame, channel: EntityId | None) -> None:
        """Upward hand-off from the physical layer."""
        if isinstance(frame, ControlFrame):
            self.handle_control(node, frame, channel)
            return
        route = frame.header
        if route is None or route.next_index == 0 or route.hops[route.next_index - 1].dst != node:
            self._count("overheard")
            return
        self.forward(node, frame)

    # channel multiplexing ------------------------------------------------------
    def _queue(self, channel: EntityId):
        q = self.queues.get(channel)
        if q is None:
            q = self.queues[channel] = (deque(), DeficitRoundRobin())
        return q

    def _enqueue_control(self, channel: EntityId, node: EntityId, frame: ControlFrame) -> None:
        ctrl, _ = self._queue(channel)
        ctrl.append((node, frame))
        self._pump(channel)

    def _pump(self, channel: EntityId) -> None:
        if self.phy.channel_busy(channel):
            return
        ctrl, drr = self._queue(channel)
        ch = self.topo.channels[channel]
        while not self.phy.channel_busy(channel):
            if ctrl:
                node, frame = ctrl.popleft()
                if not self.topo.usable(ch, self.engine.now):
                    self._count("control_link_down")
                    continue
                try:
                    self.phy.transmit(node, channel, frame)
                except EnergyExhaustedError:
                    self._count("control_energy")
                continue
            got = drr.pop()
            if got is None:
                return
            flow, (node, tdu_id, hop), _ = got
            self._launch(node, channel, tdu_id, hop, flow)

    def _launch(self, node, channel, tdu_id, hop: Hop, flow) -> None:
        try:
            tdu = self.phy.release_tdu(node, tdu_id)
        except EnergyExhaustedError:
            self.phy.discard_tdu(node, tdu_id)
            self._count("drops_energy", flow)
            self.engine.trace.record("drop", (node, tdu_id), reason="energy")
            return
        if not self.topo.usable(self.topo.channels[channel], self.engine.now):
            self._count("drops_link", flow)
            self.engine.trace.record("drop", (node, tdu_id), reason="link-down")
            return
        out = tdu.replace(header=tdu.header.advanced())
        try:
            self.phy.transmit(node, channel, out, intended=hop.dst)
        except EnergyExhaustedError:
            self._count("drops_energy", flow)
            self.engine.trace.record("drop", (node, tdu_id), reason="energy")

    def transmit_done(self, node, channel, frame, outcome: str) -> None:
        if outcome == "energy":
            self._count("drops_energy", getattr(frame, "flow", None))
            self.engine.trace.record("drop", (node, frame.id), reason="energy")
        elif outcome == "retry_exhausted":
            self._count("drops_retry", frame.flow)
        self._pump(channel)

    def bottleneck(self, offer: PathOffer) -> tuple[EntityId, float]:
        """(channel, effective capacity) of the tightest hop, given current activity."""
        busy = list(self.phy.active)
        best = None
        for hop in offer.hops:
            cap = effective_capacity(self.topo, hop.channel, busy)
            if best is None or cap < best[1]:
                best = (hop.channel, cap)
        return best
