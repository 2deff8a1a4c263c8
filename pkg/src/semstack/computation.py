"""Computation layer: ADU packaging, negotiation with the network, encoding choice.

Payload bits are never stored for integrity checks. They are regenerated
from (master seed, flow key, ADU sequence number) on both sides.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .core import EntityId, IdAllocator
from .embodiment import SymbolBlock
from .errors import ContractViolation, NoRouteError, ValidationError
from .sim.rng import rng_for


@dataclass(frozen=True)
class Encoding:
    rate: float  # bits per second
    quality: int


@dataclass(frozen=True)
class AppProfile:
    kind: str
    total_bits: int = 0
    encodings: tuple[Encoding, ...] = ()
    adu_interval: float = 0.1

    def __post_init__(self):
        if self.kind == "bulk":
            if self.total_bits < 0:
                raise ValidationError("bulk total_bits must be non-negative")
        elif self.kind == "streaming":
            encs = tuple(e if isinstance(e, Encoding) else Encoding(*e) for e in self.encodings)
            if not encs:
                raise ValidationError("streaming profile needs at least one encoding")
            for a, b in zip(encs, encs[1:]):
                if not (a.rate < b.rate and a.quality < b.quality):
                    raise ValidationError(
                        "encodings must be sorted by rate with strictly increasing quality")
            if encs[0].rate <= 0:
                raise ValidationError("encoding rates must be positive")
            if not self.adu_interval > 0:
                raise ValidationError("adu_interval must be positive")
            object.__setattr__(self, "encodings", encs)
        else:
            raise ValidationError(f"profile kind must be bulk or streaming, not {self.kind!r}")


@dataclass(frozen=True, eq=False)
class Adu:
    id: EntityId
    flow: EntityId
    seq: int
    payload: SymbolBlock
    created_at: int  # ps
    semantics_tag: str = ""


@dataclass(frozen=True)
class Contract:
    flow: EntityId
    admitted: bool
    offered_capacity: float = 0.0
    offered_latency: float = float("inf")

    def __post_init__(self):
        if self.admitted and not self.offered_capacity > 0:
            raise ValidationError("an admitted contract must offer positive capacity")


class Selection(NamedTuple):
    encoding: Encoding
    degraded: bool


class PayloadSource(NamedTuple):
    master_seed: int
    flow_key: str

    def bits(self, seq: int, nbits: int) -> np.ndarray:
        rng = rng_for(self.master_seed, f"payload/{seq}", self.flow_key)
        return rng.integers(0, 2, size=nbits, dtype=np.uint8)


def package_adus(profile: AppProfile, now_ps: int, source: PayloadSource, flow: EntityId,
                 ids: IdAllocator, *, first_seq: int = 0, max_adu_bits: int = 1 << 20,
                 encoding: Encoding | None = None, tag: str = "") -> list[Adu]:
    """ADUs produced at ``now_ps``.

    Bulk profiles yield their whole transfer in ``max_adu_bits`` pieces;
    streaming profiles yield one ADU of ``encoding.rate * adu_interval`` bits.
    """
    if profile.kind == "bulk":
        sizes = [max_adu_bits] * (profile.total_bits // max_adu_bits)
        if profile.total_bits % max_adu_bits:
            sizes.append(profile.total_bits % max_adu_bits)
    else:
        enc = encoding or profile.encodings[0]
        size = round(enc.rate * profile.adu_interval)
        if size > max_adu_bits:
            raise ValidationError(f"streaming ADU of {size} bits exceeds max_adu_bits={max_adu_bits}")
        sizes = [size]
    out = []
    for k, size in enumerate(sizes):
        seq = first_seq + k
        out.append(Adu(ids.new("adu"), flow, seq, SymbolBlock(source.bits(seq, size)),
                       now_ps, tag))
    return out


def negotiate(network, flow, profile: AppProfile | None = None) -> Contract:
    """Ask the network layer what it can offer ``flow`` right now (advisory)."""
    try:
        offers = network.candidate_paths(flow.source, flow)
    except NoRouteError:
        return Contract(flow.id, False)
    from .network import flow_select_path
    best = flow_select_path(offers, flow.weights)
    channel, capacity = network.bottleneck(best)
    sharing = 1
    for other, path in network.flow_paths.items():
        if other != flow.id and any(h.channel == channel for h in path.hops):
            sharing += 1
    return Contract(flow.id, True, capacity / sharing, best.metrics.expected_time)


def adapt_encoding(profile: AppProfile, contract: Contract) -> Selection:
    """Best-quality encoding whose rate fits the offered capacity (inclusive)."""
    if profile.kind != "streaming":
        raise ContractViolation("encoding adaptation only applies to streaming profiles")
    fitting = [e for e in profile.encodings if e.rate <= contract.offered_capacity]
    if contract.admitted and fitting:
        return Selection(fitting[-1], False)
    return Selection(profile.encodings[0], True)


@dataclass(frozen=True)
class DeliveryRecord:
    adu: EntityId
    flow: EntityId
    seq: int
    latency: float
    intact: bool
    physical_tags: dict = field(default_factory=dict)
    bits: int = 0


def consume(adu_id: EntityId, flow: EntityId, seq: int, payload: SymbolBlock, created_at: int,
            now_ps: int, source: PayloadSource, tags: dict | None = None) -> DeliveryRecord:
    """Record a delivered ADU, checking its bits against the regenerated original."""
    expected = source.bits(seq, len(payload))
    intact = payload.erased_count == 0 and bool(np.array_equal(payload.bits, expected))
    return DeliveryRecord(adu_id, flow, seq, (now_ps - created_at) / 10**12, intact,
                          dict(tags or {}), len(payload))
