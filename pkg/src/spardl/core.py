"""Sparse gradient blocks, block partitioning, top-k selection and index-wise merge.

Every transmission in the simulator carries :class:`SparseBlock` objects in
COO form: a sorted array of global indexes plus the matching values, confined
to one block's half-open index range.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import reduce
from typing import Iterable, Sequence

import numpy as np

from .errors import BlockMismatch, DimensionMismatch, InvalidPartition

_EMPTY_IDX = np.empty(0, dtype=np.int64)
_EMPTY_VAL = np.empty(0, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class SparseBlock:
    block_id: int
    start: int
    stop: int
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        val = np.asarray(self.values, dtype=np.float64)
        if idx.shape != val.shape or idx.ndim != 1:
            raise DimensionMismatch("indices and values must be 1-D arrays of equal length")
        if idx.size:
            if idx[0] < self.start or idx[-1] >= self.stop:
                raise BlockMismatch(
                    f"block {self.block_id}: index outside [{self.start}, {self.stop})")
            if idx.size > 1 and (idx[1:] <= idx[:-1]).any():
                raise BlockMismatch(f"block {self.block_id}: indexes must be strictly increasing")
        idx.flags.writeable = False
        val.flags.writeable = False
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", val)

    @classmethod
    def _trusted(cls, block_id, start, stop, indices, values) -> SparseBlock:
        # for entries taken from an already valid block: sorted and in range by construction
        indices.flags.writeable = False
        values.flags.writeable = False
        obj = object.__new__(cls)
        for name, value in zip(("block_id", "start", "stop", "indices", "values"),
                               (block_id, start, stop, indices, values)):
            object.__setattr__(obj, name, value)
        return obj

    def _subset(self, mask) -> SparseBlock:
        return SparseBlock._trusted(self.block_id, self.start, self.stop, self.indices[mask], self.values[mask])

    @classmethod
    def empty(cls, block_id: int, start: int, stop: int) -> SparseBlock:
        return cls(block_id, start, stop, _EMPTY_IDX, _EMPTY_VAL)

    @classmethod
    def from_dense(cls, block_id: int, start: int, dense_slice) -> SparseBlock:
        """Every coordinate of the slice becomes an entry (zeros included)."""
        dense_slice = np.asarray(dense_slice, dtype=np.float64)
        stop = start + dense_slice.size
        return cls(block_id, start, stop, np.arange(start, stop, dtype=np.int64), dense_slice.copy())

    @classmethod
    def from_pairs(cls, block_id: int, start: int, stop: int, pairs) -> SparseBlock:
        pairs = sorted(pairs)
        if not pairs:
            return cls.empty(block_id, start, stop)
        idx, val = zip(*pairs)
        return cls(block_id, start, stop, np.array(idx), np.array(val, dtype=np.float64))

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    @property
    def volume(self) -> int:
        """Transmission cost in scalars: one index plus one value per entry."""
        return 2 * self.nnz

    @property
    def size(self) -> int:
        return self.stop - self.start

    def same_range(self, other: SparseBlock) -> bool:
        return (self.block_id, self.start, self.stop) == (other.block_id, other.start, other.stop)

    def with_entries(self, indices, values) -> SparseBlock:
        return SparseBlock(self.block_id, self.start, self.stop, indices, values)

    def scaled(self, weight: float) -> SparseBlock:
        return SparseBlock._trusted(self.block_id, self.start, self.stop, self.indices, self.values * weight)

    def to_dense(self, n: int | None = None) -> np.ndarray:
        """Scatter into a dense vector of length ``n`` (default: ``stop``)."""
        out = np.zeros(self.stop if n is None else n)
        out[self.indices] = self.values
        return out

    def pairs(self) -> list[tuple[int, float]]:
        return list(zip(self.indices.tolist(), self.values.tolist()))

    def bit_equal(self, other: SparseBlock) -> bool:
        return (self.same_range(other)
                and np.array_equal(self.indices, other.indices)
                and self.values.tobytes() == other.values.tobytes())

    def __repr__(self):
        return (f"SparseBlock(id={self.block_id}, range=[{self.start}, {self.stop}), "
                f"nnz={self.nnz})")


# The synchronized result of a full all-reduce is one block spanning [0, N).
GlobalSparseGradient = SparseBlock


@dataclass(frozen=True)
class BlockPartition:
    n: int
    num_blocks: int
    bounds: tuple[int, ...]

    def range(self, block_id: int) -> tuple[int, int]:
        return self.bounds[block_id], self.bounds[block_id + 1]

    @property
    def ranges(self) -> list[tuple[int, int]]:
        return [self.range(b) for b in range(self.num_blocks)]

    def block_of(self, index: int) -> int:
        return int(np.searchsorted(self.bounds, index, side="right")) - 1

    def split(self, dense) -> list[SparseBlock]:
        dense = np.asarray(dense, dtype=np.float64)
        if dense.shape != (self.n,):
            raise DimensionMismatch(f"expected a vector of length {self.n}, got {dense.shape}")
        return [SparseBlock.from_dense(b, lo, dense[lo:hi]) for b, (lo, hi) in enumerate(self.ranges)]

    def empty_block(self, block_id: int) -> SparseBlock:
        lo, hi = self.range(block_id)
        return SparseBlock.empty(block_id, lo, hi)


def partition(n: int, num_blocks: int) -> BlockPartition:
    """Split ``[0, n)`` into contiguous blocks; the first ``n % num_blocks`` get one extra index."""
    if num_blocks < 1 or num_blocks > n:
        raise InvalidPartition(f"cannot split {n} indexes into {num_blocks} blocks")
    base, extra = divmod(n, num_blocks)
    sizes = [base + 1] * extra + [base] * (num_blocks - extra)
    bounds = tuple(int(b) for b in np.concatenate(([0], np.cumsum(sizes))))
    return BlockPartition(n, num_blocks, bounds)


def top_k_select(block: SparseBlock, budget: int) -> tuple[SparseBlock, SparseBlock]:
    """Keep the ``budget`` largest-magnitude entries.

    Ties on magnitude go to the smaller index, so every worker that sees the
    same block selects the same set. Returns ``(selected, discarded)``, both
    sorted by index.
    """
    if budget < 0:
        raise ValueError("budget must be non-negative")
    if budget >= block.nnz:
        return block, SparseBlock.empty(block.block_id, block.start, block.stop)
    # lexsort: last key is primary
    order = np.lexsort((block.indices, -np.abs(block.values)))
    keep = np.zeros(block.nnz, dtype=bool)
    keep[order[:budget]] = True
    return block._subset(keep), block._subset(~keep)


def merge_add(a: SparseBlock, b: SparseBlock) -> SparseBlock:
    """Index-wise sum of two blocks of the same range; exact-zero sums are kept."""
    if not a.same_range(b):
        raise BlockMismatch(f"cannot merge block {a.block_id} with block {b.block_id}")
    if b.nnz == 0:
        return a
    if a.nnz == 0:
        return b
    idx = np.concatenate((a.indices, b.indices))
    val = np.concatenate((a.values, b.values))
    order = np.argsort(idx, kind="stable")
    idx, val = idx[order], val[order]
    # each index occurs at most twice, a's entry first; fold the pair into the first slot
    dup = idx[1:] == idx[:-1]
    val[:-1][dup] += val[1:][dup]
    keep = np.ones(idx.size, dtype=bool)
    keep[1:][dup] = False
    uniq, out = idx[keep], val[keep]
    return SparseBlock._trusted(a.block_id, a.start, a.stop, uniq, out)


def merge_all(blocks: Sequence[SparseBlock]) -> SparseBlock:
    """Left fold of :func:`merge_add` in the given order."""
    return reduce(merge_add, blocks)


def concat_blocks(blocks: Iterable[SparseBlock], n: int) -> GlobalSparseGradient:
    """Join disjoint-range blocks into one vector-wide sparse gradient."""
    blocks = sorted(blocks, key=lambda blk: blk.start)
    if not blocks:
        return SparseBlock.empty(0, 0, n)
    idx = np.concatenate([blk.indices for blk in blocks])
    val = np.concatenate([blk.values for blk in blocks])
    return SparseBlock(0, 0, n, idx, val)
