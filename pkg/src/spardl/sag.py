"""Team synchronization after per-team reduce-scatter.

Workers are split into ``d`` teams of ``P/d``. After the reduce-scatter,
the workers that share a within-team rank (a *position group*) hold the same
block position and must agree on one sparse block of at most
``L = d*k/P`` entries.

* :func:`rsag` - recursive doubling with a top-L selection after each
  exchange; needs a power-of-two ``d``.
* :func:`bsag` - a top-h pre-selection, a Bruck all-gather with no
  selection in flight, then one top-L selection. Works for any ``d``; ``h``
  is tuned across iterations by :class:`HController`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .collectives import bruck_schedule, ceil_log2, is_power_of_two
from .core import SparseBlock, merge_add, merge_all, top_k_select
from .errors import ConfigError, UnsupportedGroupSize
from .fabric import Cost, Fabric, drive
from .residual import ResidualStore, record_inproc

SAG_MODES = ("none", "rsag", "bsag")


@dataclass(frozen=True)
class TeamConfig:
    p: int
    d: int
    k: int

    def __post_init__(self):
        if self.d < 1 or self.p % self.d:
            raise ConfigError(f"d={self.d} must divide P={self.p}")
        if self.k % self.p:
            raise ConfigError(f"k must be divisible by P (k={self.k}, P={self.p})")
        if self.budget < 1:
            raise ConfigError("per-block budget d*k/P must be at least 1")

    @property
    def team_size(self) -> int:
        return self.p // self.d

    @property
    def budget(self) -> int:
        """``L``: entries per block after team synchronization."""
        return self.d * self.k // self.p

    def teams(self) -> list[list[int]]:
        m = self.team_size
        return [list(range(t * m, (t + 1) * m)) for t in range(self.d)]

    def position_groups(self) -> list[list[int]]:
        m = self.team_size
        return [[t * m + r for t in range(self.d)] for r in range(m)]


@dataclass
class HController:
    """Adaptive pre-selection budget for B-SAG (additive increase, halve on overshoot)."""

    h: float
    step: float
    L: int
    lo: float
    hi: float
    flag: bool = False
    history: list = field(default_factory=list, repr=False)

    @classmethod
    def initial(cls, k: int, p: int, d: int) -> HController:
        return cls(h=k / p, step=0.01 * k * (d - 1) / p, L=d * k // p, lo=k / p, hi=d * k / p)

    @property
    def budget(self) -> int:
        """``h`` rounded half-up, at least 1."""
        return max(1, math.floor(self.h + 0.5))

    def copy(self) -> HController:
        return HController(self.h, self.step, self.L, self.lo, self.hi, self.flag, list(self.history))


def controller_update(ctrl: HController, n_t: int) -> float:
    """Feed the size observed after one B-SAG; returns the next ``h``.

    Keep going in the current direction (doubling the step on the second
    agreeing observation) while the direction still makes sense; otherwise
    reverse and halve. Only ``h`` is clamped.
    """
    ctrl.history.append((ctrl.h, ctrl.step, ctrl.flag, n_t))
    if (n_t > ctrl.L) != (ctrl.step > 0):
        if ctrl.flag:
            ctrl.step *= 2
            ctrl.flag = False
        else:
            ctrl.flag = True
    else:
        ctrl.step = -ctrl.step / 2
        ctrl.flag = False
    ctrl.h = min(max(ctrl.h + ctrl.step, ctrl.lo), ctrl.hi)
    return ctrl.h


def _select(block, budget, store, weight):
    kept, dropped = top_k_select(block, budget)
    if dropped.nnz and store is not None:
        record_inproc(store, block.block_id, dropped, weight)
    return kept


def rsag_schedule(group: Sequence[int], blocks: Mapping[int, SparseBlock], budget: int,
                  stores: Mapping[int, ResidualStore] | None = None):
    """Recursive-doubling exchange with top-``budget`` after every step.

    After ``t+1`` steps the block is replicated on ``2^(t+1)`` workers, so
    each records ``1/2^(t+1)`` of what it discards.
    """
    d = len(group)
    if not is_power_of_two(d):
        raise UnsupportedGroupSize(f"rsag requires power-of-two d, got {d}")
    stores = stores or {}
    held = {w: _select(blocks[w], budget, stores.get(w), 1.0) for w in group}
    dist = 1
    while dist < d:
        plan = {w: (group[r ^ dist], [held[w]]) for r, w in enumerate(group)}
        delivered = yield plan
        for w in group:
            merged = merge_add(held[w], delivered[w].payload[0])
            held[w] = _select(merged, budget, stores.get(w), 1.0 / (2 * dist))
        dist *= 2
    return held


def bsag_schedule(group: Sequence[int], blocks: Mapping[int, SparseBlock], h: int, budget: int,
                  stores: Mapping[int, ResidualStore] | None = None):
    """Top-``h`` locally, Bruck all-gather, merge in group-rank order, top-``budget``.

    Returns ``(blocks by worker, N_t)`` where ``N_t`` is the distinct-index
    count of the gathered union.
    """
    d = len(group)
    stores = stores or {}
    pre = {w: _select(blocks[w], h, stores.get(w), 1.0) for w in group}
    gathered = yield from bruck_schedule(group, pre)
    held, n_t = {}, None
    for w in group:
        union = merge_all([blks[0] for blks in gathered[w]])
        n_t = union.nnz
        held[w] = _select(union, budget, stores.get(w), 1.0 / d)
    return held, n_t


def rsag(fabric: Fabric, group, blocks, budget, stores=None) -> dict[int, SparseBlock]:
    return drive(fabric, rsag_schedule(group, blocks, budget, stores))[0]


def bsag(fabric: Fabric, group, blocks, ctrl: HController, stores=None) -> tuple[dict, int]:
    """One B-SAG using ``ctrl``'s current ``h``; does not update the controller."""
    return drive(fabric, bsag_schedule(group, blocks, ctrl.budget, ctrl.L, stores))[0]


def _num(x: Fraction):
    return int(x) if x.denominator == 1 else float(x)


def sag_phase_cost(p: int, k: int, d: int, mode: str) -> Cost:
    """Cost of the team-synchronization phase alone."""
    if mode == "none" or d == 1:
        return Cost(0, 0, 0)
    lg = ceil_log2(d)
    if mode == "rsag":
        if not is_power_of_two(d):
            raise ConfigError("rsag requires power-of-two d")
        s = 2 * d * k * lg // p
        return Cost(lg, s, s)
    if mode == "bsag":
        return Cost(lg, _num(Fraction(2 * k * (d - 1), p)), _num(Fraction(2 * k * (d * d - d), p)))
    raise ConfigError(f"unknown sag mode {mode!r}")


def expected_cost_sag(p: int, k: int, d: int, mode: str) -> Cost:
    """Closed-form totals for the whole all-reduce with the given team setup.

    B-SAG returns an interval spanning the admissible h range. Its latency
    uses ``ceil(log2 d)`` since a non-power-of-two group cannot finish in
    fewer integral rounds.
    """
    if d < 1 or p % d:
        raise ConfigError(f"d={d} must divide P={p}")
    m = p // d
    gather_rounds = 2 * ceil_log2(m)
    if mode == "none":
        if d != 1:
            raise ConfigError("sag mode 'none' requires d=1")
        s = 4 * k * (p - 1) // p
        return Cost(gather_rounds, s, s)
    phase = sag_phase_cost(p, k, d, mode)
    if mode == "rsag":
        s = 4 * k * (p - d) // p + phase.scalars_low
        return Cost(gather_rounds + phase.rounds, s, s)
    low = Fraction(2 * k * (d * d + p - 2 * d), p * d)
    high = Fraction(2 * k * (d * d + 2 * p - 3 * d), p)
    return Cost(gather_rounds + phase.rounds, _num(low), _num(high))


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    h: float
    step: float
    flag: bool
    n_t: int
    L: int


def stationary_overlap_trace(k: int, p: int, d: int, iterations: int = 100, seed: int = 0,
                             block_size: int | None = None, shared: float = 1.0,
                             noise: float = 1.0) -> list[TraceRow]:
    """Drive one position group of ``d`` workers through repeated B-SAG rounds.

    Each worker's block is a fixed shared magnitude profile plus fresh
    per-worker noise, so the index overlap between workers is stationary.
    Row ``t`` records the controller state used in iteration ``t`` and the
    union size it produced.
    """
    ctrl = HController.initial(k, p, d)
    size = block_size or 10 * ctrl.L
    rng = np.random.default_rng(seed)
    profile = shared * rng.standard_normal(size)
    group = list(range(d))
    rows = []
    for it in range(iterations):
        blocks = {w: SparseBlock.from_dense(0, 0, profile + noise * rng.standard_normal(size))
                  for w in group}
        h, step, flag = ctrl.h, ctrl.step, ctrl.flag
        _, n_t = bsag(Fabric(d), group, blocks, ctrl)
        rows.append(TraceRow(it, h, step, flag, n_t, ctrl.L))
        controller_update(ctrl, n_t)
    return rows
