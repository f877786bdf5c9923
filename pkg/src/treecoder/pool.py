"""Append-only thought pool with tree addressing, backtracking and a JSONL journal."""

from __future__ import annotations

import enum
import itertools
import json
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable

from .domain import Address, DecompositionTree, format_address
from .errors import PoolError


class Kind(str, enum.Enum):
    REQUIREMENT = "requirement"
    MODULE_PLAN = "module_plan"
    FUNCTION_THOUGHT = "function_thought"
    SIGNATURE = "signature"
    FUNCTION_CODE = "function_code"
    TEST_CODE = "test_code"
    MODULE_CODE = "module_code"
    PROJECT_CODE = "project_code"
    ERROR_REPORT = "error_report"
    NOTE = "note"


@dataclass(frozen=True)
class ThoughtRecord:
    id: int
    author: str
    stage: str
    address: Address
    kind: Kind
    payload: Any
    created_at: float

    def to_json(self) -> str:
        return json.dumps(
            {
                "id": self.id,
                "author": self.author,
                "stage": self.stage,
                "address": list(self.address),
                "kind": self.kind.value,
                "payload": self.payload,
                "created_at": self.created_at,
            },
            sort_keys=True,
            ensure_ascii=False,
        )

    @classmethod
    def from_json(cls, line: str) -> ThoughtRecord:
        d = json.loads(line)
        return cls(d["id"], d["author"], d["stage"], tuple(d["address"]), Kind(d["kind"]),
                   d["payload"], d["created_at"])


class LogicalClock:
    """Monotone counter standing in for wall time in reproducible runs."""

    def __init__(self):
        self._counter = itertools.count()

    def __call__(self) -> float:
        return float(next(self._counter))


class ThoughtPool:
    """Every intermediate thought of a run, addressable by tree position.

    Appends are serialized under a lock, which gives a total order on ids across
    concurrent branches. When ``journal`` is set each record is also written as
    one JSON line before ``append`` returns.
    """

    def __init__(self, tree: DecompositionTree | None = None, journal: str | Path | None = None,
                 clock: Callable[[], float] = time.time):
        self._tree = tree
        self._clock = clock
        self._records: list[ThoughtRecord] = []
        self._lock = threading.Lock()
        self._journal = Path(journal) if journal is not None else None
        if self._journal is not None:
            self._journal.parent.mkdir(parents=True, exist_ok=True)
            self._journal.write_text("", encoding="utf-8")

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self):
        return iter(list(self._records))

    @property
    def records(self) -> tuple[ThoughtRecord, ...]:
        return tuple(self._records)

    def append(self, *, author: str, stage: str, address: Address, kind: Kind | str, payload: Any) -> int:
        address = tuple(address)
        if self._tree is not None and not self._tree.contains(address):
            raise PoolError(f"cannot append at unknown address {format_address(address)}")
        # round-trip through json so stored payloads equal what a reload would produce
        payload = json.loads(json.dumps(payload))
        with self._lock:
            rec = ThoughtRecord(len(self._records), author, stage, address, Kind(kind), payload, self._clock())
            if self._journal is not None:
                with self._journal.open("a", encoding="utf-8") as fh:
                    fh.write(rec.to_json() + "\n")
                    fh.flush()
            self._records.append(rec)
        return rec.id

    def get(self, record_id: int) -> ThoughtRecord:
        try:
            return self._records[record_id]
        except IndexError:
            raise PoolError(f"no record with id {record_id}") from None

    def latest(self, address: Address, kind: Kind | str) -> ThoughtRecord | None:
        """Highest-id record at ``address`` of ``kind``; ``None`` when nothing was written."""
        address, kind = tuple(address), Kind(kind)
        for rec in reversed(self._records):
            if rec.address == address and rec.kind is kind:
                return rec
        return None

    def lineage(self, address: Address) -> list[ThoughtRecord]:
        """Records on the path from the root to ``address``, ordered by depth then id."""
        address = tuple(address)
        if self._tree is not None and not self._tree.contains(address):
            raise PoolError(f"lineage of unknown address {format_address(address)}")
        prefixes = {address[:d]: d for d in range(len(address) + 1)}
        hits = [r for r in self._records if r.address in prefixes]
        return sorted(hits, key=lambda r: (prefixes[r.address], r.id))

    def select(self, address: Address | None = None, kind: Kind | str | None = None,
               subtree: bool = False) -> list[ThoughtRecord]:
        out = []
        for r in self._records:
            if kind is not None and r.kind is not Kind(kind):
                continue
            if address is not None:
                a = tuple(address)
                if subtree:
                    if r.address[: len(a)] != a:
                        continue
                elif r.address != a:
                    continue
            out.append(r)
        return out

    def addresses(self) -> set[Address]:
        return {r.address for r in self._records}

    def dump(self, path: str | Path) -> None:
        Path(path).write_text("".join(r.to_json() + "\n" for r in self._records), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> ThoughtPool:
        pool = cls()
        records = _read_journal(Path(path).read_text(encoding="utf-8").split("\n"))
        for expected, rec in enumerate(records):
            if rec.id != expected:
                raise PoolError(f"journal ids not contiguous at line {expected + 1}")
        pool._records = records
        return pool


def _read_journal(lines: Iterable[str]) -> list[ThoughtRecord]:
    out = []
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            out.append(ThoughtRecord.from_json(line))
        except (ValueError, KeyError) as exc:
            raise PoolError(f"journal line {n} is corrupt: {exc}") from None
    return out
