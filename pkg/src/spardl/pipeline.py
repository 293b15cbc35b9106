"""End-to-end sparse all-reduce.

Per iteration and worker: add the carried residual, split into ``P/d``
blocks and keep the top ``L = d*k/P`` of each, reduce-scatter inside the
team, synchronize position groups across teams (R-SAG or B-SAG when
``d > 1``), all-gather the reduced blocks inside the team, then compute the
residual for the next iteration.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from .collectives import bruck_schedule, ceil_log2, is_power_of_two
from .core import GlobalSparseGradient, concat_blocks, partition, top_k_select
from .errors import ConfigError, ConsistencyError, DimensionMismatch
from .fabric import Cost, Fabric, LedgerReport, drive
from .residual import MODES, ResidualStore, apply_residual, finalize, record_local
from .sag import (SAG_MODES, HController, TeamConfig, bsag_schedule, controller_update,
                  expected_cost_sag, rsag_schedule)
from .srs import TIMINGS, srs_schedule


@dataclass(frozen=True)
class ClusterConfig:
    P: int
    N: int
    k: int
    d: int = 1
    sag: str = "none"
    residual: str = "gres"
    timing: str = "optimized"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.P < 1:
            raise ConfigError("P must be at least 1")
        if self.N < 1:
            raise ConfigError("N must be at least 1")
        if self.sag not in SAG_MODES:
            raise ConfigError(f"sag must be one of {SAG_MODES}, got {self.sag!r}")
        if self.residual not in MODES:
            raise ConfigError(f"residual must be one of {MODES}, got {self.residual!r}")
        if self.timing not in TIMINGS:
            raise ConfigError(f"timing must be one of {TIMINGS}, got {self.timing!r}")
        if self.k % self.P:
            raise ConfigError(f"k must be divisible by P (k={self.k}, P={self.P})")
        if not 0 < self.k <= self.N:
            raise ConfigError(f"k must lie in [1, N], got k={self.k}")
        if self.sag == "rsag" and not is_power_of_two(self.d):
            raise ConfigError("rsag requires power-of-two d")
        if self.d < 1 or self.P % self.d:
            raise ConfigError(f"d must divide P (d={self.d}, P={self.P})")
        if self.sag == "none" and self.d != 1:
            raise ConfigError("sag 'none' requires d=1")
        if self.sag != "none" and self.d == 1:
            raise ConfigError(f"sag {self.sag!r} requires d > 1")
        if self.P // self.d > self.N:
            raise ConfigError(f"cannot split N={self.N} into P/d={self.P // self.d} blocks")

    @property
    def team(self) -> TeamConfig:
        return TeamConfig(self.P, self.d, self.k)

    @property
    def budget(self) -> int:
        return self.d * self.k // self.P

    def as_row(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class AllReduceResult:
    results: list[GlobalSparseGradient]
    residuals: list[np.ndarray]
    ledger: LedgerReport
    fabric: Fabric
    inputs: list[np.ndarray]
    n_t: dict[int, int] = field(default_factory=dict)

    @property
    def global_gradient(self) -> GlobalSparseGradient:
        return self.results[0]

    def phase(self, name: str) -> LedgerReport:
        return self.fabric.phase_report(name)


def verify_consistency(results: Sequence[GlobalSparseGradient]) -> bool:
    """True iff every worker holds a bit-identical synchronized gradient."""
    first = results[0]
    return all(first.bit_equal(r) for r in results[1:])


def conservation_error(inputs: Sequence, final: GlobalSparseGradient, residuals: Sequence) -> float:
    """Max over coordinates of |sum(inputs) - final - sum(residuals)|, relative to the input scale."""
    total = np.sum(inputs, axis=0)
    err = np.abs(total - final.to_dense(total.size) - np.sum(residuals, axis=0)).max()
    return float(err / max(1.0, np.abs(total).max()))


def init_controllers(config: ClusterConfig) -> dict[int, HController]:
    if config.sag != "bsag":
        return {}
    return {r: HController.initial(config.k, config.P, config.d) for r in range(config.P // config.d)}


def spardl_all_reduce(gradients: Sequence, config: ClusterConfig, residuals: Sequence | None = None,
                      controllers: dict[int, HController] | None = None,
                      fabric: Fabric | None = None) -> AllReduceResult:
    """One synchronized sparse all-reduce over ``config.P`` simulated workers.

    ``residuals`` are last iteration's residual vectors (``None`` for zeros).
    B-SAG ``controllers`` (one per position group) are updated in place.
    Raises :class:`ConsistencyError` if workers end up disagreeing.
    """
    P, N = config.P, config.N
    if len(gradients) != P:
        raise DimensionMismatch(f"expected {P} gradient vectors, got {len(gradients)}")
    team = config.team
    m, L = team.team_size, team.budget
    fabric = fabric or Fabric(P)
    residuals = residuals if residuals is not None else [None] * P
    if config.sag == "bsag" and controllers is None:
        controllers = init_controllers(config)

    part = partition(N, m)
    inputs, stores, blocks = [], {}, {}
    for w in range(P):
        g = apply_residual(gradients[w], residuals[w])
        inputs.append(g)
        store = stores[w] = ResidualStore(config.residual, part, g)
        blocks[w] = []
        for blk in part.split(g):
            kept, dropped = top_k_select(blk, L)
            record_local(store, blk.block_id, dropped)
            blocks[w].append(kept)

    with fabric.phase("srs"):
        reduced = {}
        for out in drive(fabric, *[srs_schedule(t, blocks, L, stores, config.timing) for t in team.teams()]):
            reduced.update(out)

    n_t = {}
    if config.d > 1:
        groups = team.position_groups()
        with fabric.phase("sag"):
            if config.sag == "rsag":
                outs = drive(fabric, *[rsag_schedule(g, reduced, L, stores) for g in groups])
            else:
                outs = drive(fabric, *[bsag_schedule(g, reduced, controllers[r].budget, L, stores)
                                       for r, g in enumerate(groups)])
                for r, (_, count) in enumerate(outs):
                    n_t[r] = count
                    controller_update(controllers[r], count)
                outs = [held for held, _ in outs]
        for out in outs:
            reduced.update(out)

    with fabric.phase("gather"):
        gathered = {}
        for out in drive(fabric, *[bruck_schedule(t, reduced) for t in team.teams()]):
            gathered.update(out)
    results = [concat_blocks([blks[0] for blks in gathered[w]], N) for w in range(P)]

    if not verify_consistency(results):
        raise ConsistencyError("workers disagree on the synchronized gradient")
    new_residuals = [finalize(stores[w], results[w]) for w in range(P)]
    return AllReduceResult(results, new_residuals, fabric.report(), fabric, inputs, n_t)


class SparDLCluster:
    """Carries residuals and B-SAG controllers across iterations."""

    def __init__(self, config: ClusterConfig):
        self.config = config
        self.residuals: list | None = None
        self.controllers = init_controllers(config)
        self.fabric = Fabric(config.P)
        self.iterations = 0

    def all_reduce(self, gradients) -> AllReduceResult:
        out = spardl_all_reduce(gradients, self.config, self.residuals, self.controllers, self.fabric)
        self.residuals = out.residuals
        self.iterations += 1
        return out


def expected_cost(P: int, k: int, d: int = 1, mode: str = "none") -> Cost:
    """Closed-form cost of one all-reduce.

    ``mode`` is a SAG mode or ``"topka"`` for the gather-everything baseline.
    """
    if mode == "topka":
        return Cost(ceil_log2(P), 2 * (P - 1) * k, 2 * (P - 1) * k)
    return expected_cost_sag(P, k, d, mode)


def complexity_table(P: int, k: int, n: int, d: int = 2) -> dict[str, Cost]:
    """Latency and bandwidth of several all-reduce schemes at one setting.

    Baselines not implemented here appear only in closed form. ``log P`` is
    taken as ``ceil(log2 P)``.
    """
    lg = ceil_log2(P)
    frac = (P - 1) / P
    rows = {
        "dense": Cost(2 * lg, 2 * frac * n, 2 * frac * n),
        "topka": expected_cost(P, k, mode="topka"),
        "topkdsa": Cost(P + 2 * lg, 4 * frac * k, frac * (2 * k + n)),
        "gtopk": Cost(2 * lg, 4 * lg * k, 4 * lg * k),
        "oktopk": Cost(2 * (P + lg), 2 * k * frac, 6 * k * frac),
        "spardl": expected_cost(P, k, 1, "none"),
    }
    if d > 1 and P % d == 0:
        if is_power_of_two(d):
            rows["spardl_rsag"] = expected_cost(P, k, d, "rsag")
        rows["spardl_bsag"] = expected_cost(P, k, d, "bsag")
    return rows
