import numpy as np
import pytest

from spardl.collectives import dense_all_reduce_reference, local_top_k
from spardl.errors import ConfigError, DimensionMismatch
from spardl.pipeline import (ClusterConfig, SparDLCluster, complexity_table, conservation_error, expected_cost,
                             init_controllers, spardl_all_reduce, verify_consistency)


def int_grads(rng, p, n, lo=-20, hi=21):
    return [rng.integers(lo, hi, n).astype(float) for _ in range(p)]


def exact_conservation(out, n):
    total = np.sum(out.inputs, axis=0)
    return np.array_equal(total, out.global_gradient.to_dense(n) + np.sum(out.residuals, axis=0))


@pytest.mark.parametrize("kwargs,message", [
    (dict(P=6, N=100, k=601), "divisible"),
    (dict(P=6, N=100, k=0), "k must lie"),
    (dict(P=6, N=100, k=120), "k must lie"),
    (dict(P=8, N=100, k=8, d=3, sag="rsag"), "power-of-two"),
    (dict(P=8, N=100, k=8, d=3, sag="bsag"), "divide"),
    (dict(P=8, N=100, k=8, d=2), "requires d=1"),
    (dict(P=8, N=100, k=8, d=1, sag="bsag"), "requires d > 1"),
    (dict(P=8, N=100, k=8, residual="xres"), "residual"),
    (dict(P=8, N=100, k=8, timing="soon"), "timing"),
    (dict(P=8, N=100, k=8, sag="xsag"), "sag"),
    (dict(P=0, N=100, k=8), "P must"),
])
def test_config_validation(kwargs, message):
    with pytest.raises(ConfigError, match=message):
        ClusterConfig(**kwargs)


def test_config_row_and_budget():
    cfg = ClusterConfig(6, 600, 60, 3, "bsag")
    assert cfg.budget == 30 and cfg.team.team_size == 2
    assert cfg.as_row()["sag"] == "bsag"
    assert set(init_controllers(cfg)) == {0, 1}
    assert init_controllers(ClusterConfig(6, 600, 60)) == {}


def test_single_worker_is_local_top_k(rng):
    g = rng.standard_normal(50)
    out = spardl_all_reduce([g], ClusterConfig(1, 50, 5))
    assert out.global_gradient.bit_equal(local_top_k(g, 5)[0])
    assert out.ledger.max_rounds == 0 and out.ledger.max_scalars_received == 0


def test_full_budget_equals_dense(rng):
    grads = int_grads(rng, 4, 40)
    out = spardl_all_reduce(grads, ClusterConfig(4, 40, 40))
    np.testing.assert_array_equal(out.global_gradient.to_dense(40), dense_all_reduce_reference(grads)[0])
    # float sums differ from the reference only by reduction order
    grads = [rng.standard_normal(40) for _ in range(4)]
    out = spardl_all_reduce(grads, ClusterConfig(4, 40, 40))
    np.testing.assert_allclose(out.global_gradient.to_dense(40), dense_all_reduce_reference(grads)[0],
                               rtol=0, atol=1e-12)


def test_six_workers_example(rng):
    grads = int_grads(rng, 6, 6000)
    out = spardl_all_reduce(grads, ClusterConfig(6, 6000, 600))
    assert verify_consistency(out.results)
    assert exact_conservation(out, 6000)
    assert (out.ledger.max_rounds, out.ledger.max_scalars_received) == (6, 2000)
    assert out.global_gradient.nnz <= 600
    srs, gather = out.phase("srs"), out.phase("gather")
    assert srs.max_rounds + gather.max_rounds == 6


def test_wrong_worker_count(rng):
    with pytest.raises(DimensionMismatch):
        spardl_all_reduce(int_grads(rng, 3, 20), ClusterConfig(4, 20, 4))


@pytest.mark.parametrize("P,d,sag", [(4, 1, "none"), (8, 2, "rsag"), (8, 4, "rsag"), (6, 3, "bsag"),
                                     (8, 2, "bsag"), (5, 5, "bsag"), (7, 1, "none")])
@pytest.mark.parametrize("timing", ["optimized", "naive"])
def test_conservation_and_consistency(P, d, sag, timing, rng):
    N, k = 30 * P, 3 * P
    for _ in range(5):
        out = spardl_all_reduce(int_grads(rng, P, N), ClusterConfig(P, N, k, d, sag, timing=timing))
        assert verify_consistency(out.results)
        assert exact_conservation(out, N)
        assert all(r.nnz <= k for r in out.results[:1])
        pred = expected_cost(P, k, d, sag)
        assert out.ledger.max_rounds == pred.rounds


def test_float_conservation(rng):
    grads = [rng.standard_normal(400) * 10 for _ in range(8)]
    for d, sag in [(1, "none"), (2, "rsag"), (4, "bsag")]:
        out = spardl_all_reduce(grads, ClusterConfig(8, 400, 40, d, sag))
        assert conservation_error(out.inputs, out.global_gradient, out.residuals) <= 1e-9


def test_residual_modes_share_the_result(rng):
    grads = int_grads(rng, 6, 120)
    outs = {m: spardl_all_reduce(grads, ClusterConfig(6, 120, 12, residual=m)) for m in ("gres", "pres", "lres")}
    assert outs["gres"].global_gradient.bit_equal(outs["pres"].global_gradient)
    assert outs["gres"].global_gradient.bit_equal(outs["lres"].global_gradient)
    for w in range(6):
        diff = outs["pres"].residuals[w] != outs["gres"].residuals[w]
        assert set(np.flatnonzero(diff)) <= set(outs["gres"].global_gradient.indices.tolist())


def test_cluster_carries_state(rng):
    cluster = SparDLCluster(ClusterConfig(6, 120, 12, 3, "bsag"))
    h0 = cluster.controllers[0].h
    first = cluster.all_reduce(int_grads(rng, 6, 120))
    grads = int_grads(rng, 6, 120)
    second = cluster.all_reduce(grads)
    assert cluster.iterations == 2 and cluster.controllers[0].history
    assert cluster.controllers[0].h != h0
    for w in range(6):
        np.testing.assert_array_equal(second.inputs[w], grads[w] + first.residuals[w])
    assert cluster.fabric.ledger.max_rounds == 8
    assert set(second.n_t) == {0, 1}


def test_expected_cost_rows():
    c = expected_cost(4, 100, mode="topka")
    assert (c.rounds, c.scalars_low) == (2, 600)
    assert expected_cost(6, 600).scalars_low == 2000
    table = complexity_table(8, 800, 80000, d=2)
    assert table["spardl"].rounds == 6 and table["spardl_rsag"].rounds == 5
    assert table["dense"].scalars_low == 2 * 7 / 8 * 80000
    assert {"topkdsa", "gtopk", "oktopk", "spardl_bsag"} <= set(table)
    assert "spardl_rsag" not in complexity_table(6, 600, 6000, d=3)
