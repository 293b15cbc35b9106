"""Spar-Reduce-Scatter: bag-based reduce-scatter with per-block sparsification.

Each of the ``m`` team members owns ``m`` blocks lined up in a circle. Rank
``w`` keeps block ``w`` and packs the following blocks into sending bags of
sizes 1, 2, 4, ... (the last one possibly short). Bags are sent largest
first, to the rank ``2^(l-i)`` ahead at step ``i``, so every rank always
receives blocks it still holds and ends with only its own block, reduced
over the team. No power-of-two team size is needed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

from .collectives import ceil_log2
from .core import SparseBlock, merge_add, top_k_select
from .errors import TheoremViolation
from .fabric import Fabric, drive
from .residual import ResidualStore, record_inproc

TIMINGS = ("optimized", "naive")


@dataclass(frozen=True)
class BagSchedule:
    worker: int
    m: int
    levels: int
    preservation: int
    sending_bags: tuple[tuple[int, ...], ...]
    last_size: int

    def bag(self, j: int) -> tuple[int, ...]:
        """Sending bag ``B_j`` (1-based)."""
        return self.sending_bags[j - 1]


def build_bags(m: int, w: int) -> BagSchedule:
    if m < 1 or not 0 <= w < m:
        raise ValueError(f"rank {w} is not in a team of {m}")
    levels = ceil_log2(m)
    last = m - 2 ** (levels - 1) if levels else 0
    bags = []
    for j in range(1, levels + 1):
        first = 2 ** (j - 1)
        size = last if j == levels else first
        bags.append(tuple((w + first + i) % m for i in range(size)))
    return BagSchedule(w, m, levels, w, tuple(bags), last)


def _sparsify(held, block_id, budget, store):
    kept, dropped = top_k_select(held[block_id], budget)
    if dropped.nnz and store is not None:
        record_inproc(store, block_id, dropped, 1.0)
    held[block_id] = kept


def srs_schedule(team: Sequence[int], blocks: Mapping[int, Sequence[SparseBlock]], budget: int,
                 stores: Mapping[int, ResidualStore] | None = None, timing: str = "optimized"):
    """Round generator for one team; returns ``{worker: reduced own block}``.

    ``blocks[worker][b]`` is that worker's block ``b``. Every selection's
    discards go to the selecting worker's residual store.
    """
    if timing not in TIMINGS:
        raise ValueError(f"unknown SRS timing {timing!r}")
    stores = stores or {}
    m = len(team)
    plans = {r: build_bags(m, r) for r in range(m)}
    held = {r: {b: blocks[w][b] for b in range(m)} for r, w in enumerate(team)}
    levels = plans[0].levels

    for step in range(1, levels + 1):
        dist = 2 ** (levels - step)
        j = levels - step + 1
        plan = {}
        for r, w in enumerate(team):
            bag = plans[r].bag(j)
            for b in bag:
                _sparsify(held[r], b, budget, stores.get(w))
            plan[w] = (team[(r + dist) % m], [held[r].pop(b) for b in bag])
        delivered = yield plan
        for r, w in enumerate(team):
            msg = delivered[w]
            incoming = {blk.block_id for blk in msg.payload}
            if not incoming <= held[r].keys():
                raise TheoremViolation(
                    f"step {step}: rank {r} received blocks {sorted(incoming - held[r].keys())} "
                    f"it no longer holds")
            for blk in msg.payload:
                held[r][blk.block_id] = merge_add(held[r][blk.block_id], blk)
            if timing == "naive":
                for b in list(held[r]):
                    _sparsify(held[r], b, budget, stores.get(w))

    result = {}
    for r, w in enumerate(team):
        if held[r].keys() != {r}:
            raise TheoremViolation(f"rank {r} ended holding blocks {sorted(held[r])}")
        _sparsify(held[r], r, budget, stores.get(w))
        result[w] = held[r][r]
    return result


def run_srs(fabric: Fabric, team: Sequence[int], blocks, budget: int, stores=None,
            timing: str = "optimized") -> dict[int, SparseBlock]:
    return drive(fabric, srs_schedule(team, blocks, budget, stores, timing))[0]


def expected_cost_srs(m: int, k: int) -> tuple[int, int]:
    """Rounds and received scalars when every transmitted block is full."""
    if m < 1 or k % m:
        raise ValueError(f"k={k} must be divisible by team size {m}")
    return ceil_log2(m), 2 * k * (m - 1) // m
