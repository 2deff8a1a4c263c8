"""Symbol carriers: translation between embodiments, distortion, decay, coding."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .core import SPEED_OF_LIGHT
from .errors import DistortionError, FramingError, ValidationError


@dataclass(frozen=True)
class EmbodimentSpec:
    """Physical carrier parameters.

    stability is joules per bit state change, malleability bits per second
    writable, longevity the mean lifetime of a stored bit in seconds
    (``math.inf`` for no decay) and mobility the top transport speed.
    """

    name: str
    stability: float
    malleability: float
    longevity: float = math.inf
    mobility: float = SPEED_OF_LIGHT
    symbol_size_bits: int = 1
    erase_energy: float | None = None
    copyable: bool = True

    def __post_init__(self):
        for attr in ("stability", "malleability", "longevity", "mobility"):
            v = getattr(self, attr)
            if not v > 0:
                raise ValidationError(f"embodiment {self.name}: {attr} must be > 0, got {v}")
        if self.mobility > SPEED_OF_LIGHT:
            raise ValidationError(f"embodiment {self.name}: mobility exceeds c")
        if int(self.symbol_size_bits) != self.symbol_size_bits or self.symbol_size_bits < 1:
            raise ValidationError(f"embodiment {self.name}: symbol_size_bits must be a positive integer")
        if self.erase_energy is not None and self.erase_energy < 0:
            raise ValidationError(f"embodiment {self.name}: erase_energy must be >= 0")

    @property
    def erase_energy_per_bit(self) -> float:
        return self.stability if self.erase_energy is None else self.erase_energy


def _as_bits(bits) -> np.ndarray:
    if isinstance(bits, str):
        if set(bits) - {"0", "1"}:
            raise ValidationError("bit strings may only contain '0' and '1'")
        return np.frombuffer(bits.encode("ascii"), dtype=np.uint8) - ord("0")
    arr = np.asarray(bits, dtype=np.uint8)
    if arr.ndim != 1:
        raise ValidationError("bits must be one-dimensional")
    if arr.size and arr.max() > 1:
        raise ValidationError("bits must be 0 or 1")
    return arr


@dataclass(frozen=True, eq=False)
class SymbolBlock:
    bits: np.ndarray
    erasures: np.ndarray = None
    embodiment: EmbodimentSpec | None = None
    padding: int = 0

    def __post_init__(self):
        bits = _as_bits(self.bits)
        mask = (np.zeros(bits.size, dtype=bool) if self.erasures is None
                else np.asarray(self.erasures, dtype=bool))
        if mask.shape != bits.shape:
            raise ValidationError("erasure mask length differs from bit length")
        bits.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "bits", bits)
        object.__setattr__(self, "erasures", mask)

    @classmethod
    def from_bits(cls, bits, embodiment=None) -> "SymbolBlock":
        return cls(_as_bits(bits), None, embodiment)

    def __len__(self):
        return int(self.bits.size)

    @property
    def erased_count(self) -> int:
        return int(self.erasures.sum())

    def to_str(self, erased: str = "?") -> str:
        chars = np.where(self.bits == 1, "1", "0")
        chars[self.erasures] = erased
        return "".join(chars.tolist())

    def replace(self, **changes) -> "SymbolBlock":
        fields = dict(bits=self.bits, erasures=self.erasures,
                      embodiment=self.embodiment, padding=self.padding)
        fields.update(changes)
        return SymbolBlock(**fields)

    def __eq__(self, other):
        # erased positions carry no value, so they are excluded from the comparison
        if not isinstance(other, SymbolBlock) or len(self) != len(other):
            return NotImplemented if not isinstance(other, SymbolBlock) else False
        if not np.array_equal(self.erasures, other.erasures):
            return False
        keep = ~self.erasures
        return bool(np.array_equal(self.bits[keep], other.bits[keep]))

    __hash__ = None


class TranslationCost(NamedTuple):
    energy: float
    time: float


def translate(block: SymbolBlock, target: EmbodimentSpec) -> tuple[SymbolBlock, TranslationCost]:
    """Rehouse ``block`` in ``target``, padding to its symbol size.

    Padding left by an earlier translation is stripped first, so translating
    back to the original embodiment restores the original bit string.
    """
    if block.erased_count:
        raise DistortionError(block.erased_count, "cannot translate a block with erasures")
    core = block.bits[:len(block) - block.padding] if block.padding else block.bits
    pad = (-core.size) % target.symbol_size_bits
    out = np.concatenate([core, np.zeros(pad, dtype=np.uint8)]) if pad else core.copy()
    n = int(out.size)
    cost = TranslationCost(energy=target.stability * n, time=n / target.malleability)
    return SymbolBlock(out, None, target, pad), cost


def copy_cost(embodiment: EmbodimentSpec, bits: int) -> float:
    if not embodiment.copyable:
        raise ValidationError(f"embodiment {embodiment.name} forbids copying")
    return embodiment.stability * bits


def erase_cost(embodiment: EmbodimentSpec, bits: int) -> float:
    return embodiment.erase_energy_per_bit * bits


def _check_p(p: float) -> None:
    if not 0.0 <= p <= 1.0:
        raise ValidationError(f"probability must lie in [0, 1], got {p}")


def bsc_distort(block: SymbolBlock, p: float, rng: np.random.Generator) -> SymbolBlock:
    """Flip each bit independently with probability ``p``."""
    _check_p(p)
    flips = rng.random(len(block)) < p
    return block.replace(bits=block.bits ^ flips.astype(np.uint8))


def bec_distort(block: SymbolBlock, p: float, rng: np.random.Generator) -> SymbolBlock:
    """Erase each bit independently with probability ``p``."""
    _check_p(p)
    hits = rng.random(len(block)) < p
    return block.replace(erasures=block.erasures | hits)


def decay(block: SymbolBlock, stored_for: float, longevity: float,
          rng: np.random.Generator) -> SymbolBlock:
    """Exponential storage decay: each bit erased w.p. 1 - exp(-stored_for/longevity)."""
    if stored_for < 0:
        raise ValidationError("stored_for must be non-negative")
    if stored_for == 0 or math.isinf(longevity):
        return block
    p = -math.expm1(-stored_for / longevity)
    return bec_distort(block, p, rng)


@dataclass(frozen=True)
class Codec:
    kind: str = "identity"
    repeat: int = 1

    def __post_init__(self):
        if self.kind == "identity":
            object.__setattr__(self, "repeat", 1)
        elif self.kind == "repetition":
            if self.repeat < 3 or self.repeat % 2 == 0:
                raise ValidationError("repetition codec needs an odd repeat >= 3")
        else:
            raise ValidationError(f"unknown codec kind {self.kind!r}")

    @classmethod
    def repetition(cls, repeat: int = 3) -> "Codec":
        return cls("repetition", repeat)


class DecodeResult(NamedTuple):
    block: SymbolBlock
    corrected: int
    unrecoverable: int


def encode(block: SymbolBlock, codec: Codec) -> SymbolBlock:
    if block.erased_count:
        raise DistortionError(block.erased_count, "cannot encode a block with erasures")
    if codec.kind == "identity":
        return block
    return block.replace(bits=np.repeat(block.bits, codec.repeat),
                         erasures=None, padding=0)


def decode(block: SymbolBlock, codec: Codec) -> DecodeResult:
    """Majority decode ignoring erased positions.

    A group that is fully erased, or tied among its surviving positions,
    comes out erased and counts as unrecoverable.
    """
    if codec.kind == "identity":
        return DecodeResult(block, 0, 0)
    r = codec.repeat
    if len(block) % r:
        raise FramingError(f"block length {len(block)} is not a multiple of {r}")
    bits = block.bits.reshape(-1, r)
    valid = ~block.erasures.reshape(-1, r)
    ones = (bits.astype(bool) & valid).sum(axis=1)
    zeros = valid.sum(axis=1) - ones
    lost = ones == zeros  # covers the all-erased case (0 == 0)
    out = (ones > zeros).astype(np.uint8)
    corrected = int(((ones > 0) & (zeros > 0) & ~lost).sum())
    decoded = SymbolBlock(out, lost, block.embodiment)
    return DecodeResult(decoded, corrected, int(lost.sum()))
