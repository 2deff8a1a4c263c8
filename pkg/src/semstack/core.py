"""Physical quantities, identification, and fundamental bounds.

Simulation time is carried as integer picoseconds so that event ordering is
exact. The bound computations (:func:`clock_bits`, :func:`light_cone_reachable`)
run on :class:`fractions.Fraction` so that boundary cases are decided exactly.
"""
from __future__ import annotations

import math
import unicodedata
from dataclasses import dataclass
from fractions import Fraction
from functools import total_ordering
from numbers import Rational
from typing import Callable, Iterable, Mapping, Sequence

from .errors import ValidationError

SPEED_OF_LIGHT = 299_792_458  # m/s, exact by definition of the metre
PLANCK_TIME = Fraction("5.39e-44")  # s
SECONDS_PER_DAY = 86_400
SECONDS_PER_YEAR = Fraction(36525, 100) * SECONDS_PER_DAY  # 365.25 d

PS_PER_SECOND = 10**12

NAMESPACES = ("node", "channel", "flow", "adu", "tdu", "path", "content")
_NS_RANK = {ns: i for i, ns in enumerate(NAMESPACES)}


def exact(value) -> Fraction:
    """Convert a number (or numeric string) to an exact Fraction.

    Floats are read through their shortest decimal repr, so ``5.39e-44``
    means the decimal value a human typed, not its binary neighbour.
    """
    if isinstance(value, Fraction):
        return value
    if isinstance(value, (int, Rational)):
        return Fraction(value)
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ValidationError(f"expected a finite number, got {value!r}")
        return Fraction(repr(value))
    if isinstance(value, str):
        return Fraction(value.strip())
    raise ValidationError(f"expected a number, got {type(value).__name__}")


def to_ps(seconds) -> int:
    """Seconds to integer picoseconds, rounding half to even."""
    return round(exact(seconds) * PS_PER_SECOND)


def ceil_ps(seconds: float | Fraction) -> int:
    """Seconds to picoseconds, rounding up (never earlier than the real instant)."""
    return math.ceil(Fraction(seconds) * PS_PER_SECOND)


def ps_to_seconds(ps: int) -> float:
    return ps / PS_PER_SECOND


def format_ps(ps: int) -> str:
    """Fixed-point decimal rendering of a picosecond timestamp (12 places)."""
    sign = "-" if ps < 0 else ""
    whole, frac = divmod(abs(ps), PS_PER_SECOND)
    return f"{sign}{whole}.{frac:012d}"


@total_ordering
@dataclass(frozen=True)
class EntityId:
    """Namespaced dense serial; orders by (namespace rank, serial)."""

    namespace: str
    serial: int

    def __post_init__(self):
        if self.namespace not in _NS_RANK:
            raise ValidationError(f"unknown namespace {self.namespace!r}")
        if not 0 <= self.serial < 2**64:
            raise ValidationError(f"serial out of range: {self.serial}")

    @property
    def sort_key(self) -> tuple[int, int]:
        return (_NS_RANK[self.namespace], self.serial)

    def __lt__(self, other):
        if not isinstance(other, EntityId):
            return NotImplemented
        return self.sort_key < other.sort_key

    def __str__(self):
        return f"{self.namespace}#{self.serial}"


class IdAllocator:
    """Hands out dense serials per namespace in creation order."""

    def __init__(self):
        self._next = {ns: 0 for ns in NAMESPACES}

    def new(self, namespace: str) -> EntityId:
        if namespace not in self._next:
            raise ValidationError(f"unknown namespace {namespace!r}")
        serial = self._next[namespace]
        self._next[namespace] = serial + 1
        return EntityId(namespace, serial)

    def peek(self, namespace: str) -> int:
        return self._next[namespace]


@dataclass(frozen=True)
class SpaceTimePoint:
    t: float
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    @property
    def position(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.z)

    def distance(self, other: "SpaceTimePoint") -> float:
        return math.dist(self.position, other.position)


@dataclass(frozen=True)
class ClockSpec:
    duration: Fraction
    resolution: Fraction

    def __post_init__(self):
        d, r = exact(self.duration), exact(self.resolution)
        if d <= 0 or r <= 0:
            raise ValidationError("clock duration and resolution must be positive")
        if r > d:
            raise ValidationError("clock resolution exceeds duration")
        object.__setattr__(self, "duration", d)
        object.__setattr__(self, "resolution", r)

    @property
    def intervals(self) -> int:
        return math.ceil(self.duration / self.resolution)


def clock_bits(spec: ClockSpec) -> int:
    """Bits needed for a counter that spans ``duration`` at ``resolution``.

    Exact integer arithmetic: ceil(log2(N)) is the bit length of N - 1.
    """
    n = spec.intervals
    bits = (n - 1).bit_length()
    assert (1 << bits) >= n and (bits == 0 or (1 << (bits - 1)) < n)
    return bits


def _check_speed(signal_speed) -> None:
    if not signal_speed > 0:
        raise ValidationError(f"signal speed must be positive, got {signal_speed}")
    if signal_speed > SPEED_OF_LIGHT:
        raise ValidationError(f"signal speed {signal_speed} exceeds c")


def light_cone_reachable(origin: SpaceTimePoint, target: SpaceTimePoint,
                         signal_speed=SPEED_OF_LIGHT) -> bool:
    """True iff ``target`` lies in the closed future cone of ``origin``."""
    _check_speed(signal_speed)
    dt = Fraction(target.t) - Fraction(origin.t)
    if dt < 0:
        return False
    dist_sq = sum((Fraction(a) - Fraction(b)) ** 2
                  for a, b in zip(target.position, origin.position))
    reach = Fraction(signal_speed) * dt
    return dist_sq <= reach * reach


def light_cone_slack(origin: SpaceTimePoint, target: SpaceTimePoint,
                     signal_speed=SPEED_OF_LIGHT) -> float:
    """signal_speed * dt - distance; non-negative inside the cone when dt >= 0."""
    _check_speed(signal_speed)
    return float(signal_speed) * (float(target.t) - float(origin.t)) - origin.distance(target)


# --- identification -------------------------------------------------------

@dataclass(frozen=True)
class Region:
    center: tuple[float, float, float]
    radius: float
    t: float = 0.0

    def __post_init__(self):
        if self.radius < 0:
            raise ValidationError(f"region radius must be non-negative, got {self.radius}")


@dataclass(frozen=True)
class Label:
    """A name (appearance) or an address (location).

    Addresses hold either a node :class:`EntityId` or a :class:`Region`.
    """

    kind: str
    value: object

    def __post_init__(self):
        if self.kind == "name":
            if not isinstance(self.value, str) or not self.value:
                raise ValidationError("name labels must be non-empty strings")
            if any(unicodedata.category(ch) == "Cc" for ch in self.value):
                raise ValidationError(f"name label {self.value!r} contains control characters")
        elif self.kind == "address":
            if not isinstance(self.value, (EntityId, Region)):
                raise ValidationError("address labels hold a node id or a region")
        else:
            raise ValidationError(f"label kind must be 'name' or 'address', not {self.kind!r}")

    @classmethod
    def name(cls, value: str) -> "Label":
        return cls("name", value)

    @classmethod
    def address(cls, value) -> "Label":
        return cls("address", value)


@dataclass(frozen=True)
class LabelConstraint:
    """Predicate over labels.

    kinds: ``exact_name``, ``name_prefix``, ``node_id``, ``region`` and
    ``any_of`` (``value`` is then a tuple of constraints).
    """

    kind: str
    value: object

    KINDS = ("exact_name", "name_prefix", "node_id", "region", "any_of")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValidationError(f"unknown constraint kind {self.kind!r}")
        if self.kind == "region" and not isinstance(self.value, Region):
            raise ValidationError("region constraint needs a Region value")
        if self.kind == "any_of":
            object.__setattr__(self, "value", tuple(self.value))

    @classmethod
    def exact_name(cls, name: str):
        return cls("exact_name", name)

    @classmethod
    def name_prefix(cls, prefix: str):
        return cls("name_prefix", prefix)

    @classmethod
    def node_id(cls, node: EntityId):
        return cls("node_id", node)

    @classmethod
    def region(cls, center, radius, t=0.0):
        return cls("region", Region(tuple(float(c) for c in center), radius, t))

    @classmethod
    def any_of(cls, constraints: Iterable["LabelConstraint"]):
        return cls("any_of", tuple(constraints))

    def __str__(self):
        if self.kind == "any_of":
            return "any(" + ",".join(str(c) for c in self.value) + ")"
        if self.kind == "region":
            r = self.value
            return f"region({r.center[0]},{r.center[1]},{r.center[2]};{r.radius}@{r.t})"
        return f"{self.kind}:{self.value}"


Locator = Callable[[EntityId, float], SpaceTimePoint]


def label_matches(label: Label, constraint: LabelConstraint,
                  locate: Locator | None = None) -> bool:
    """Whether ``label`` satisfies ``constraint``.

    Spatial matches need ``locate(node_id, t)`` to place node addresses at
    the constraint's time; region addresses are matched by their centre.
    """
    kind = constraint.kind
    if kind == "any_of":
        return any(label_matches(label, c, locate) for c in constraint.value)
    if kind in ("exact_name", "name_prefix"):
        if label.kind != "name":
            return False
        if kind == "exact_name":
            return label.value == constraint.value
        return label.value.startswith(constraint.value)
    if label.kind != "address":
        return False
    if kind == "node_id":
        return label.value == constraint.value
    region: Region = constraint.value
    if isinstance(label.value, Region):
        where = label.value.center
    else:
        if locate is None:
            return False
        where = locate(label.value, region.t).position
    return _within(where, region.center, region.radius)


def _within(a, b, radius) -> bool:
    # exact, so boundary points and tiny offsets are decided consistently
    d2 = sum((Fraction(p) - Fraction(q)) ** 2 for p, q in zip(a, b))
    return d2 <= Fraction(radius) ** 2


def resolve(constraint: LabelConstraint,
            registry: Mapping[EntityId, Sequence[Label]] | Iterable[tuple[EntityId, Sequence[Label]]],
            locate: Locator | None = None) -> list[EntityId]:
    """All ids with at least one matching label, ascending."""
    items = registry.items() if isinstance(registry, Mapping) else registry
    return sorted(eid for eid, labels in items
                  if any(label_matches(lb, constraint, locate) for lb in labels))
