"""All-Gather algorithms, the all-gather-then-sum top-k baseline, and a dense oracle."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .core import SparseBlock, merge_all, top_k_select
from .errors import InvalidGroup, InvalidK, UnsupportedGroupSize
from .fabric import Fabric, drive


def ceil_log2(m: int) -> int:
    return (m - 1).bit_length() if m > 1 else 0


def is_power_of_two(m: int) -> bool:
    return m >= 1 and m & (m - 1) == 0


def _as_blocks(payload) -> tuple[SparseBlock, ...]:
    if isinstance(payload, SparseBlock):
        return (payload,)
    return tuple(payload)


def _pack(items):
    """Flatten ``[(src_rank, blocks), ...]`` into a payload plus an envelope."""
    payload = [blk for _, blocks in items for blk in blocks]
    meta = [(src, len(blocks)) for src, blocks in items]
    return payload, meta


def _unpack(msg):
    items, pos = [], 0
    for src, count in msg.meta:
        items.append((src, msg.payload[pos:pos + count]))
        pos += count
    return items


def _check_group(group):
    if len(group) < 1:
        raise InvalidGroup("an all-gather group needs at least one worker")
    if len(set(group)) != len(group):
        raise InvalidGroup("duplicate worker in group")


def bruck_schedule(group: Sequence[int], payloads):
    """Bruck all-gather over ``group`` as a round generator.

    At step t rank r sends what it has accumulated to rank r - 2^t and
    receives from rank r + 2^t; the last step of a non-power-of-two group
    forwards only the blocks still missing downstream. The result maps each
    worker to the per-source payloads in group-rank order.
    """
    _check_group(group)
    m = len(group)
    held = {r: [(r, _as_blocks(payloads[w]))] for r, w in enumerate(group)}
    dist = 1
    while dist < m:
        count = min(dist, m - dist)
        plan = {}
        for r, w in enumerate(group):
            payload, meta = _pack(held[r][:count])
            plan[w] = (group[(r - dist) % m], payload, meta)
        delivered = yield plan
        for r, w in enumerate(group):
            held[r].extend(_unpack(delivered[w]))
        dist *= 2
    # local rotation back to source-rank order; not communication
    return {w: [blocks for _, blocks in sorted(held[r])] for r, w in enumerate(group)}


def recursive_doubling_schedule(group: Sequence[int], payloads):
    _check_group(group)
    m = len(group)
    if not is_power_of_two(m):
        raise UnsupportedGroupSize(f"recursive doubling needs a power-of-two group, got {m}")
    held = {r: [(r, _as_blocks(payloads[w]))] for r, w in enumerate(group)}
    dist = 1
    while dist < m:
        plan = {}
        for r, w in enumerate(group):
            payload, meta = _pack(held[r])
            plan[w] = (group[r ^ dist], payload, meta)
        delivered = yield plan
        for r, w in enumerate(group):
            held[r].extend(_unpack(delivered[w]))
        dist *= 2
    return {w: [blocks for _, blocks in sorted(held[r])] for r, w in enumerate(group)}


def bruck_all_gather(fabric: Fabric, group: Sequence[int], payloads) -> dict[int, list]:
    """Every worker in ``group`` ends with all payloads ordered by group rank.

    ``payloads`` maps worker id to a block or a sequence of blocks.
    """
    return drive(fabric, bruck_schedule(group, payloads))[0]


def recursive_doubling_all_gather(fabric: Fabric, group: Sequence[int], payloads) -> dict[int, list]:
    return drive(fabric, recursive_doubling_schedule(group, payloads))[0]


def local_top_k(dense, k: int) -> tuple[SparseBlock, SparseBlock]:
    """Top-k of a whole dense vector, as ``(selected, discarded)`` spanning ``[0, N)``."""
    dense = np.asarray(dense, dtype=np.float64)
    if k < 0 or k > dense.size:
        raise InvalidK(f"k={k} is outside [0, {dense.size}]")
    return top_k_select(SparseBlock.from_dense(0, 0, dense), k)


def topka_baseline(fabric: Fabric, gradients: Sequence, k: int) -> list[SparseBlock]:
    """Local top-k, Bruck all-gather of all P sparse sets, then index-wise sum.

    The merged union is returned unsparsified (up to P*k entries). Worker i
    of the fabric contributes ``gradients[i]``.
    """
    p = len(gradients)
    if p < 1:
        raise InvalidGroup("empty cluster")
    selected = {w: local_top_k(g, k)[0] for w, g in enumerate(gradients)}
    gathered = bruck_all_gather(fabric, list(range(p)), selected)
    return [merge_all([blocks[0] for blocks in gathered[w]]) for w in range(p)]


def dense_all_reduce_reference(gradients: Sequence) -> list[np.ndarray]:
    """Naive gather-sum-broadcast; not metered."""
    total = np.zeros_like(np.asarray(gradients[0], dtype=np.float64))
    for g in gradients:
        total = total + np.asarray(g, dtype=np.float64)
    return [total.copy() for _ in gradients]
