import itertools

import numpy as np
import pytest

from tsgcnext import graph as G
from tsgcnext.data import SkeletonGraph
from tsgcnext.engine import Tensor, backward
from tsgcnext.exceptions import DimensionError, InputError, ResourceError

import oracles


def test_from_graph_slices_and_row_normalization():
    g = SkeletonGraph.chain(4)
    a = G.AdjacencySet.from_graph(g).values.data
    np.testing.assert_array_equal(a[:, :, 0], np.eye(4))
    # inward: child v -> parent v-1; outward: parent -> child
    assert a[2, 1, 1] == 1.0 and a[1, 2, 1] == 0.0
    assert a[1, 2, 2] == 1.0 and a[2, 1, 2] == 0.0
    sums = a.sum(axis=1)
    assert set(np.round(sums.ravel(), 12)) <= {0.0, 1.0}
    # the root has no parent and the leaf no child: their rows stay empty
    assert sums[0, 1] == 0.0 and sums[3, 2] == 0.0


def test_from_graph_ntu25_branching_normalized():
    a = G.AdjacencySet.from_graph(SkeletonGraph.ntu25()).values.data
    # the spine joint 20 has four children, each gets 1/4 in the outward slice
    np.testing.assert_allclose(a[20, [1, 2, 4, 8], 2], 0.25)


def test_row_normalize_leaves_zero_rows():
    a = np.zeros((2, 2, 1))
    a[0, :, 0] = [2.0, 2.0]
    np.testing.assert_allclose(G.row_normalize(a)[:, :, 0], [[0.5, 0.5], [0.0, 0.0]])


def test_with_zeroed_row_is_a_copy():
    adj = G.AdjacencySet(Tensor(np.ones((3, 3, 2))))
    z = adj.with_zeroed_row(1)
    assert np.all(z.values.data[1] == 0) and np.all(adj.values.data[1] == 1)


def test_node_mix_matches_loops_small(rng):
    for shape in [(1, 1, 1, 1, 1), (2, 3, 2, 4, 3), (1, 2, 3, 3, 2)]:
        a, x = rng.standard_normal(shape[3:4] * 2 + shape[4:]), rng.standard_normal(shape)
        out = G.node_mix(Tensor(a), Tensor(x)).data
        np.testing.assert_allclose(out, oracles.node_mix_loops(a, x), atol=1e-12)


@pytest.mark.parametrize("fn", [G.node_mix, G.node_mix_repeated])
def test_branch_major_layout_agrees(rng, fn):
    a = rng.standard_normal((4, 4, 3))
    x = rng.standard_normal((2, 3, 5, 4, 3))
    y1 = fn(Tensor(a), Tensor(x)).data
    y2 = fn(Tensor(a), Tensor(np.moveaxis(x, 4, 1).copy()), layout="nkctv").data
    np.testing.assert_allclose(np.moveaxis(y2, 1, 4), y1, atol=1e-13)


def test_node_mix_shape_errors():
    with pytest.raises(DimensionError):
        G.node_mix(Tensor(np.ones((3, 3, 2))), Tensor(np.ones((1, 1, 1, 4, 2))))
    with pytest.raises(DimensionError):
        G.node_mix(Tensor(np.ones((3, 3, 2))), Tensor(np.ones((1, 1, 1, 3, 3))))
    with pytest.raises(InputError):
        G.node_mix(Tensor(np.ones((3, 3, 2))), Tensor(np.ones((1, 1, 1, 3, 2))), layout="bogus")


def test_repeat_backward_sums_copies(rng):
    a = Tensor(rng.standard_normal((2, 2, 1)), requires_grad=True)
    backward(G.repeat_batch(a, 5).sum())
    np.testing.assert_allclose(a.grad, 5.0)


def test_formulations_registry():
    assert G.get_formulation("baseline") is G.node_mix
    assert G.get_formulation("repeated") is G.node_mix_repeated
    with pytest.raises(InputError):
        G.get_formulation("fast")


def test_equivalence_exact_on_unit_shape():
    r = G.check_grad_equivalence((1, 1, 1, 1, 1), trials=3)
    assert r.passed and r.forward_max_diff == r.grad_a_max_diff == r.grad_x_max_diff == 0.0


def test_equivalence_zero_trials_is_vacuous():
    r = G.check_grad_equivalence((2, 2, 2, 2, 2), trials=0)
    assert r.passed and "no trials" in r.summary()


def test_equivalence_rejects_bad_shape():
    with pytest.raises(DimensionError):
        G.check_grad_equivalence((2, 2, 2, 2), trials=1)


def test_equivalence_independent_of_batch_order(rng):
    # grad of A is a sum over samples, so it must not depend on sample order
    a0 = rng.standard_normal((3, 3, 2))
    x0 = rng.standard_normal((4, 2, 2, 3, 2))
    grads = []
    for perm in (np.arange(4), np.array([3, 1, 0, 2])):
        a = Tensor(a0, requires_grad=True)
        backward(G.node_mix_repeated(a, Tensor(x0[perm])).sum())
        grads.append(a.grad)
    np.testing.assert_allclose(grads[0], grads[1], atol=1e-13)


def test_bench_small_and_csv_round_trip(tmp_path):
    path = tmp_path / "b.csv"
    recs = G.bench_formulations([(2, 3, 4, 5, 3), (1, 2, 2, 3, 1)], reps=5, warmup=1, csv_path=path)
    assert len(recs) == 4
    assert all(r.forward_ms > 0 and r.backward_ms > 0 for r in recs)
    assert all(r.max_abs_diff < 1e-10 for r in recs)
    rows = G.read_bench_csv(path)
    assert len(rows) == 8
    back = {(r["shape"], r["formulation"], r["phase"]): r["median_ms"] for r in rows}
    for r in recs:
        assert back[(r.shape, r.formulation, "forward")] == r.forward_ms
        assert back[(r.shape, r.formulation, "backward")] == r.backward_ms
    ratios = G.backward_ratios(recs)
    assert set(ratios) == {(2, 3, 4, 5, 3), (1, 2, 2, 3, 1)}


def test_bench_requires_five_reps():
    with pytest.raises(InputError):
        G.bench_formulations([(1, 1, 1, 1, 1)], reps=4)


def test_bench_memory_guard(monkeypatch):
    class VM:
        available = 1024

    import psutil

    monkeypatch.setattr(psutil, "virtual_memory", lambda: VM())
    with pytest.raises(ResourceError, match=r"\(128, 96, 64, 25, 3\)"):
        G.bench_formulations([(128, 96, 64, 25, 3)], reps=5)


def test_default_bench_shapes_include_batch_128_stage_one():
    assert (128, 96, 64, 25, 3) in G.DEFAULT_BENCH_SHAPES
    assert len(G.DEFAULT_BENCH_SHAPES) >= 4
