"""Partitioned, counter-based random streams.

Every stream is a Philox generator whose key is a BLAKE2b digest of
(master seed, domain, entity). Streams therefore never depend on the order
in which they are requested, and adding or removing an entity leaves every
other entity's draws untouched.
"""
from __future__ import annotations

import hashlib

import numpy as np

from ..core import EntityId


def stream_key(master_seed: int, domain: str, entity: EntityId | str) -> int:
    if not 0 <= master_seed < 2**64:
        raise ValueError(f"master seed must be an unsigned 64-bit integer, got {master_seed}")
    ent = entity if isinstance(entity, str) else f"{entity.namespace}#{entity.serial}"
    material = f"{master_seed}\x1f{domain}\x1f{ent}".encode("utf-8")
    return int.from_bytes(hashlib.blake2b(material, digest_size=16).digest(), "little")


def rng_for(master_seed: int, domain: str, entity: EntityId | str) -> np.random.Generator:
    """Independent stream for ``(domain, entity)`` under ``master_seed``.

    ``entity`` may be an :class:`EntityId` or a stable string key such as a
    scenario-declared name.
    """
    return np.random.Generator(np.random.Philox(key=stream_key(master_seed, domain, entity)))


class StreamBank:
    """Lazily created streams for one run, cached by (domain, entity)."""

    def __init__(self, master_seed: int):
        self.master_seed = master_seed
        self._streams: dict[tuple[str, str], np.random.Generator] = {}

    def get(self, domain: str, entity: EntityId | str) -> np.random.Generator:
        key = (domain, entity if isinstance(entity, str) else str(entity))
        stream = self._streams.get(key)
        if stream is None:
            stream = self._streams[key] = rng_for(self.master_seed, domain, entity)
        return stream
