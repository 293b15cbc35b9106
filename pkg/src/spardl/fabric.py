"""Lockstep message-passing simulator with an alpha-beta cost ledger.

A round is a global barrier: every message in the plan is delivered before
the call returns. Each worker that sends or receives in a round is charged
one latency unit; receivers are charged the scalar volume of what arrives.
"""

from __future__ import annotations

import csv
import io
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Generator, Mapping

import numpy as np

from .core import SparseBlock
from .errors import ScheduleViolation


@dataclass(frozen=True)
class Cost:
    """Latency rounds and received scalars; the scalar count may be an interval."""

    rounds: int
    scalars_low: int | float
    scalars_high: int | float

    @property
    def exact(self) -> bool:
        return self.scalars_low == self.scalars_high

    def admits(self, rounds: int, scalars: int) -> bool:
        return rounds == self.rounds and self.scalars_low <= scalars <= self.scalars_high


@dataclass(frozen=True)
class Message:
    source: int
    target: int
    payload: tuple[SparseBlock, ...]
    # envelope data (e.g. per-source block counts); free, like an MPI header
    meta: Any = None

    @property
    def scalar_volume(self) -> int:
        return sum(blk.volume for blk in self.payload)


@dataclass
class CostLedger:
    rounds: np.ndarray
    scalars_received: np.ndarray
    scalars_sent: np.ndarray

    @classmethod
    def zeros(cls, p: int) -> CostLedger:
        return cls(np.zeros(p, dtype=np.int64), np.zeros(p, dtype=np.int64),
                   np.zeros(p, dtype=np.int64))

    @property
    def max_rounds(self) -> int:
        return int(self.rounds.max(initial=0))

    @property
    def max_scalars(self) -> int:
        return int(self.scalars_received.max(initial=0))

    def __iadd__(self, other: CostLedger):
        self.rounds += other.rounds
        self.scalars_received += other.scalars_received
        self.scalars_sent += other.scalars_sent
        return self

    def copy(self) -> CostLedger:
        return CostLedger(self.rounds.copy(), self.scalars_received.copy(), self.scalars_sent.copy())

    def to_csv(self, fh=None) -> str | None:
        """Write ``worker_id,rounds,scalars_received`` rows; returns text if ``fh`` is None."""
        out = io.StringIO() if fh is None else fh
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["worker_id", "rounds", "scalars_received"])
        for w, (r, s) in enumerate(zip(self.rounds.tolist(), self.scalars_received.tolist())):
            writer.writerow([w, r, s])
        return out.getvalue() if fh is None else None


@dataclass(frozen=True)
class LedgerReport:
    ledger: CostLedger
    max_rounds: int
    max_scalars_received: int


@dataclass
class Fabric:
    """``P`` logical workers exchanging :class:`Message` objects in rounds."""

    p: int
    keep_log: bool = False
    log: list[Message] = field(init=False, default_factory=list)
    ledger: CostLedger = field(init=False)
    phases: dict[str, CostLedger] = field(init=False, default_factory=dict)
    total_rounds: int = field(init=False, default=0)
    _phase: str | None = field(init=False, default=None)

    def __post_init__(self):
        if self.p < 1:
            raise ValueError("a fabric needs at least one worker")
        self.ledger = CostLedger.zeros(self.p)

    @contextmanager
    def phase(self, name: str):
        """Additionally attribute all traffic inside the block to ``name``."""
        prev, self._phase = self._phase, name
        self.phases.setdefault(name, CostLedger.zeros(self.p))
        try:
            yield
        finally:
            self._phase = prev

    def exchange(self, plan: Mapping[int, tuple]) -> dict[int, Message]:
        """Run one round.

        ``plan`` maps a source worker to ``(target, payload)`` or
        ``(target, payload, meta)``; workers without an entry stay idle.
        Returns the delivered message keyed by target.
        """
        if not plan:
            return {}
        delivered: dict[int, Message] = {}
        for src in sorted(plan):
            target, payload, *rest = plan[src]
            if not (0 <= src < self.p and 0 <= target < self.p):
                raise ScheduleViolation(f"worker id out of range in {src} -> {target}")
            if target == src:
                raise ScheduleViolation(f"worker {src} sends to itself")
            if target in delivered:
                raise ScheduleViolation(f"worker {target} is the target of two messages in one round")
            delivered[target] = Message(src, target, tuple(payload), rest[0] if rest else None)

        active = set(plan) | set(delivered)
        books = [self.ledger]
        if self._phase is not None:
            books.append(self.phases[self._phase])
        for book in books:
            for w in active:
                book.rounds[w] += 1
            for msg in delivered.values():
                vol = msg.scalar_volume
                book.scalars_received[msg.target] += vol
                book.scalars_sent[msg.source] += vol
        self.total_rounds += 1
        if self.keep_log:
            self.log.extend(delivered.values())
        return delivered

    def report(self) -> LedgerReport:
        return LedgerReport(self.ledger.copy(), self.ledger.max_rounds, self.ledger.max_scalars)

    def phase_report(self, name: str) -> LedgerReport:
        book = self.phases.get(name, CostLedger.zeros(self.p))
        return LedgerReport(book.copy(), book.max_rounds, book.max_scalars)


def ledger_report(fabric: Fabric) -> LedgerReport:
    return fabric.report()


def merge_rounds(*plans: Mapping[int, tuple]) -> dict[int, tuple]:
    """Union of per-group round plans whose senders are disjoint."""
    merged: dict[int, tuple] = {}
    for plan in plans:
        for src, spec in plan.items():
            if src in merged:
                raise ScheduleViolation(f"worker {src} appears in two plans of one round")
            merged[src] = spec
    return merged


def drive(fabric: Fabric, *schedules: Generator) -> list:
    """Run schedule generators in lockstep and return their results.

    A schedule yields one round plan at a time and is sent back the messages
    addressed to its own workers. Plans of concurrent schedules are merged
    into a single fabric round, so disjoint teams share the round sequence.
    """
    results: list = [None] * len(schedules)
    plans: dict[int, dict] = {}
    for i, gen in enumerate(schedules):
        try:
            plans[i] = next(gen)
        except StopIteration as stop:
            results[i] = stop.value
    while plans:
        delivered = fabric.exchange(merge_rounds(*plans.values()))
        for i in list(plans):
            mine = {msg.target: msg for msg in delivered.values() if msg.source in plans[i]}
            try:
                plans[i] = schedules[i].send(mine)
            except StopIteration as stop:
                results[i] = stop.value
                del plans[i]
    return results
