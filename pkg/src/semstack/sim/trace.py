"""Canonical event trace and its SHA-256 digest."""
from __future__ import annotations

import hashlib
from typing import Callable, Iterable, NamedTuple

from ..core import EntityId, format_ps


class TraceRecord(NamedTuple):
    time: int  # ps
    seq: int
    kind: str
    ids: tuple
    fields: dict

    def canonical(self) -> str:
        ids = ",".join(str(i) for i in self.ids) or "-"
        parts = [format_ps(self.time), str(self.seq), self.kind, ids]
        parts.extend(f"{k}={_fmt(v)}" for k, v in self.fields.items())
        return " ".join(parts)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return "[" + ",".join(_fmt(v) for v in value) + "]"
    if isinstance(value, EntityId):
        return str(value)
    return str(value).replace(" ", "_")


class Trace:
    """Append-only log; the digest is updated as records arrive.

    With ``keep=False`` only the digest and the record count survive.
    """

    def __init__(self, clock: Callable[[], int], keep: bool = True):
        self._clock = clock
        self.keep = keep
        self.records: list[TraceRecord] = []
        self.count = 0
        self._hash = hashlib.sha256()

    def record(self, kind: str, ids: Iterable = (), **fields) -> None:
        rec = TraceRecord(self._clock(), self.count, kind, tuple(ids), fields)
        self.count += 1
        self._hash.update(rec.canonical().encode("utf-8") + b"\n")
        if self.keep:
            self.records.append(rec)

    @property
    def digest(self) -> str:
        return self._hash.hexdigest()

    def lines(self) -> list[str]:
        return [r.canonical() for r in self.records]

    def dump(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(r.canonical() + "\n")

    def of_kind(self, *kinds: str) -> list[TraceRecord]:
        return [r for r in self.records if r.kind in kinds]
