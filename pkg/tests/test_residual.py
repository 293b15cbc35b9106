import numpy as np
import pytest

from spardl.core import SparseBlock, partition
from spardl.errors import BlockMismatch, DimensionMismatch, ResidualStateError
from spardl.residual import ResidualStore, apply_residual, finalize, record_inproc, record_local


def store(mode="gres", g=None, n=8, blocks=2):
    g = np.arange(1.0, n + 1) if g is None else np.asarray(g, dtype=float)
    return ResidualStore(mode, partition(len(g), blocks), g)


def pairs(block_id, start, stop, items):
    return SparseBlock.from_pairs(block_id, start, stop, items)


def test_apply_residual(rng):
    g = rng.integers(-5, 5, 6).astype(float)
    r = rng.integers(-5, 5, 6).astype(float)
    np.testing.assert_array_equal(apply_residual(g, np.zeros(6)), g)
    np.testing.assert_array_equal(apply_residual(np.zeros(6), r), r)
    np.testing.assert_array_equal(apply_residual(g, r), g + r)
    np.testing.assert_array_equal(apply_residual(g, None), g)
    with pytest.raises(DimensionMismatch):
        apply_residual(g, r[:3])


def test_store_validation():
    with pytest.raises(ValueError):
        store(mode="xres")
    with pytest.raises(DimensionMismatch):
        ResidualStore("gres", partition(5, 1), np.zeros(4))


def test_record_inproc_accumulates():
    s = store()
    record_inproc(s, 0, pairs(0, 0, 4, []))
    assert not s.xi.any()
    record_inproc(s, 0, pairs(0, 0, 4, [(3, 1.0)]))
    record_inproc(s, 0, pairs(0, 0, 4, [(3, 2.0)]))
    assert s.xi[3] == 3.0 and np.count_nonzero(s.xi) == 1


def test_record_inproc_checks():
    s = store()
    with pytest.raises(BlockMismatch):
        record_inproc(s, 1, pairs(0, 0, 4, [(1, 1.0)]))
    with pytest.raises(BlockMismatch):
        record_inproc(s, 0, pairs(0, 0, 5, [(4, 1.0)]))
    for w in (0.0, 1.5):
        with pytest.raises(ValueError):
            record_inproc(s, 0, pairs(0, 0, 4, [(1, 1.0)]), w)


def test_halves_from_two_partners_sum_to_full_discard():
    discard = pairs(1, 4, 8, [(4, 3.0), (6, -5.0)])
    stores = [store(), store()]
    for s in stores:
        record_inproc(s, 1, discard, 0.5)
    np.testing.assert_array_equal(stores[0].xi + stores[1].xi, discard.to_dense(8))


def test_record_local_goes_to_both():
    s = store()
    record_local(s, 0, pairs(0, 0, 4, [(2, 7.0)]))
    assert s.xi[2] == 7.0 and s.local[2] == 7.0


def test_finalize_modes():
    g = [5.0, 1.0, 2.0, 4.0]
    final = pairs(0, 0, 4, [(0, 9.0), (1, 3.0)])
    out = {}
    for mode in ("gres", "pres", "lres"):
        s = store(mode, g, blocks=1)
        record_local(s, 0, pairs(0, 0, 4, [(1, 1.0), (2, 2.0)]))
        record_inproc(s, 0, pairs(0, 0, 4, [(0, 0.5)]), 0.5)
        out[mode] = finalize(s, final)
    np.testing.assert_array_equal(out["gres"], [0.25, 1.0, 2.0, 4.0])
    np.testing.assert_array_equal(out["pres"], [0.0, 0.0, 2.0, 4.0])
    np.testing.assert_array_equal(out["lres"], [0.0, 1.0, 2.0, 0.0])


def test_finalize_edges():
    s = store(blocks=1)
    np.testing.assert_array_equal(finalize(s, SparseBlock.empty(0, 0, 8)), s.g_copy)
    with pytest.raises(ResidualStateError):
        finalize(s, SparseBlock.empty(0, 0, 8))
    with pytest.raises(ResidualStateError):
        record_inproc(s, 0, pairs(0, 0, 8, [(1, 1.0)]))
    s = store(blocks=1)
    assert finalize(s, pairs(0, 0, 8, [(5, 1.0)]))[5] == 0.0
    s = store(blocks=1)
    with pytest.raises(DimensionMismatch):
        finalize(s, SparseBlock.empty(0, 0, 9))


def test_in_and_end_procedure_scenario():
    # two workers, one block, budget 1 per selection.
    # worker 0: index 1 dropped mid-reduction but index 1 survives via worker 1;
    # index 2 never reaches the final gradient.
    g0, g1 = np.array([0.0, 2.0, 1.5]), np.array([0.0, 3.0, 0.0])
    s0, s1 = store("gres", g0, blocks=1), store("gres", g1, blocks=1)
    record_inproc(s0, 0, pairs(0, 0, 3, [(1, 2.0)]))
    final = pairs(0, 0, 3, [(1, 3.0)])
    r0, r1 = finalize(s0, final), finalize(s1, final)
    assert r0[1] == 2.0 and r1[1] == 0.0  # in-procedure, recovered at the discarder
    assert r0[2] == 1.5  # end-procedure, recovered at the origin
    np.testing.assert_array_equal(g0 + g1, final.to_dense(3) + r0 + r1)


def test_pres_and_lres_support_relations(rng):
    for _ in range(20):
        g = rng.integers(-5, 6, 10).astype(float)
        sel = np.sort(rng.choice(10, 4, replace=False))
        final = SparseBlock(0, 0, 10, sel, np.ones(4))
        local = SparseBlock(0, 0, 10, np.setdiff1d(np.arange(10), sel)[:3], np.ones(3))
        inproc = SparseBlock(0, 0, 10, sel[:2], np.full(2, 7.0))
        res = {}
        for mode in ("gres", "pres", "lres"):
            s = store(mode, g, blocks=1)
            record_local(s, 0, local)
            record_inproc(s, 0, inproc)
            res[mode] = finalize(s, final)
        assert set(np.flatnonzero(res["pres"])) <= set(np.flatnonzero(res["gres"])) | set(sel)
        assert not res["pres"][sel].any()
        np.testing.assert_array_equal(res["lres"], local.to_dense(10))
