"""Residual collection: what every worker carries into the next iteration.

Three schemes are supported:

``gres``
    Global collection. Coordinates that reach the synchronized gradient take
    their residual from ``xi``, the discards this worker produced while
    selecting; all other coordinates keep this worker's full pre-selection
    value from ``g_copy``.
``pres``
    Partial collection. Like ``gres`` but ``xi`` is ignored, so coordinates
    present in the synchronized gradient get a zero residual.
``lres``
    Local collection. Only the discards of the worker's own first per-block
    selection are kept.

Under ``gres`` the discarded mass is conserved cluster-wide: for each
coordinate the sum of all inputs equals the synchronized value plus the sum
of all workers' residuals.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import BlockPartition, GlobalSparseGradient, SparseBlock
from .errors import BlockMismatch, DimensionMismatch, ResidualStateError

MODES = ("gres", "pres", "lres")


@dataclass
class ResidualStore:
    mode: str
    partition: BlockPartition
    g_copy: np.ndarray
    xi: np.ndarray = field(init=False)
    local: np.ndarray = field(init=False)
    finalized: bool = field(init=False, default=False)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown residual mode {self.mode!r}")
        self.g_copy = np.array(self.g_copy, dtype=np.float64)
        if self.g_copy.shape != (self.partition.n,):
            raise DimensionMismatch("g_copy length does not match the partition")
        self.xi = np.zeros_like(self.g_copy)
        self.local = np.zeros_like(self.g_copy)


def apply_residual(gradients, residual) -> np.ndarray:
    gradients = np.asarray(gradients, dtype=np.float64)
    if residual is None:
        return gradients.copy()
    residual = np.asarray(residual, dtype=np.float64)
    if gradients.shape != residual.shape:
        raise DimensionMismatch(f"gradient shape {gradients.shape} != residual shape {residual.shape}")
    return gradients + residual


def _check_range(store: ResidualStore, block_id: int, discarded: SparseBlock):
    if block_id != discarded.block_id or (discarded.start, discarded.stop) != store.partition.range(block_id):
        raise BlockMismatch(f"discards of block {discarded.block_id} do not fit block {block_id}")


def record_inproc(store: ResidualStore, block_id: int, discarded: SparseBlock, weight: float = 1.0):
    """Accumulate ``weight * discarded`` into this worker's ``xi``."""
    if not 0 < weight <= 1:
        raise ValueError(f"weight must lie in (0, 1], got {weight}")
    _check_range(store, block_id, discarded)
    if store.finalized:
        raise ResidualStateError("store already finalized")
    if discarded.nnz:
        store.xi[discarded.indices] += weight * discarded.values


def record_local(store: ResidualStore, block_id: int, discarded: SparseBlock):
    """Discards of the first per-block selection, before any transmission.

    They also enter ``xi``: for a coordinate that survives to the global
    gradient, ``gres`` replaces the local value by ``xi`` and would otherwise
    lose them.
    """
    record_inproc(store, block_id, discarded, 1.0)
    if discarded.nnz:
        store.local[discarded.indices] += discarded.values


def finalize(store: ResidualStore, final_global: GlobalSparseGradient) -> np.ndarray:
    """Residual vector to add to next iteration's gradient."""
    if store.finalized:
        raise ResidualStateError("finalize called twice for one iteration")
    store.finalized = True
    if final_global.stop != store.partition.n:
        raise DimensionMismatch("global gradient length does not match the store")
    support = final_global.indices
    if store.mode == "lres":
        return store.local.copy()
    residual = store.g_copy.copy()
    if store.mode == "gres":
        residual[support] = store.xi[support]
    else:
        residual[support] = 0.0
    return residual
