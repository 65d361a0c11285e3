"""Acceptance criteria 1-8, one test per criterion.

Run alone with ``pytest tests/test_acceptance.py -v``; criterion 6 trains nine
small models and takes about 25 minutes on one CPU core.
"""

import itertools
import time

import numpy as np
import pytest

from tsgcnext import cli
from tsgcnext import mechanisms as Mx
from tsgcnext.engine import Tensor
from tsgcnext.gradcheck import EQUIV_SHAPES, GRAD_TOL, run_gradcheck
from tsgcnext.graph import AdjacencySet, check_grad_equivalence, node_mix, read_bench_csv
from tsgcnext.network import ModelConfig, build_model, stage_schedule
from tsgcnext.training import AdamWState, EmaState, TrainConfig, adamw_step, ema_update, fuse_scores, lr_at

import desk_scale
import oracles


def test_1_equivalence():
    start = time.perf_counter()
    reports = [check_grad_equivalence(shape, trials=20, seed=0) for shape in EQUIV_SHAPES]
    elapsed = time.perf_counter() - start
    for r in reports:
        print(r.summary())
    assert max(EQUIV_SHAPES, key=np.prod) == (8, 16, 32, 25, 3)
    assert all(r.trials >= 20 for r in reports)
    assert all(r.forward_max_diff < 1e-12 for r in reports)
    assert all(r.grad_a_max_diff < 1e-10 and r.grad_x_max_diff < 1e-10 for r in reports)
    assert elapsed < 60, f"equivalence suite took {elapsed:.1f} s"


def test_2_gradcheck():
    start = time.perf_counter()
    report = run_gradcheck(seeds=20, equivalence_shapes=())
    elapsed = time.perf_counter() - start
    print(report.summary())
    assert GRAD_TOL == 1e-4
    assert {"ds_smg_layer", "node_mix", "gelu", "layer_norm_channel"} <= {r.op for r in report.ops}
    assert all(r.seeds == 20 for r in report.ops)
    assert report.passed, report.failures
    assert elapsed < 300, f"gradcheck took {elapsed:.1f} s"


TINY_EXTENTS = range(1, 5)


def test_3_oracles_exhaustive():
    rng = np.random.default_rng(2024)
    worst = {"node_mix": 0.0, "classical": 0.0, "ds_smg": 0.0}
    for N, C, T, V, K in itertools.product(TINY_EXTENTS, repeat=5):
        a = rng.standard_normal((V, V, K))
        x = rng.standard_normal((N, C, T, V, K))
        got = node_mix(Tensor(a), Tensor(x)).data
        worst["node_mix"] = max(worst["node_mix"], np.abs(got - oracles.node_mix_loops(a, x)).max())
    for N, C, T, V in itertools.product(TINY_EXTENTS, repeat=4):
        x = rng.standard_normal((N, C, T, V))
        a = rng.standard_normal((V, V, 3))
        co = int(rng.integers(1, 5))
        p = Mx.ClassicalParams(Tensor(rng.standard_normal((C, co))), AdjacencySet(Tensor(a)),
                               Tensor(rng.standard_normal(co)))
        ref = oracles.classical_loops(x, p.w.data, p.b.data, a)
        worst["classical"] = max(worst["classical"], np.abs(Mx.classical_layer(p, Tensor(x)).data - ref).max())
        q = Mx.generic_dssmg_params(C, V, rng)
        for static in (True, False):
            ref = oracles.ds_smg_loops(x, q.expand_w.data, q.expand_b.data, q.adjacency.values.data,
                                       q.project_w.data, q.layer_scale.data, static)
            got = Mx.ds_smg_layer(q, Tensor(x), static).data
            worst["ds_smg"] = max(worst["ds_smg"], np.abs(got - ref).max())
    print(worst)
    assert all(v < 1e-12 for v in worst.values()), worst


def test_4_node_retention():
    V, worst_classical, weakest_dssmg = 10, 0.0, np.inf
    for seed in range(20):
        rng = np.random.default_rng([seed, 4])
        cls = Mx.generic_classical_params(3, 5, V, rng)
        ds = Mx.generic_dssmg_params(3, V, rng)
        for v in range(V):
            worst_classical = max(worst_classical, Mx.node_retention_probe("classical", cls, v, seed=seed).sensitivity)
            weakest_dssmg = min(weakest_dssmg, Mx.node_retention_probe("ds-smg", ds, v, seed=seed).sensitivity)
    print(f"classical max sensitivity {worst_classical:.3e}, DS-SMG min sensitivity {weakest_dssmg:.3e}")
    assert worst_classical < 1e-12
    assert weakest_dssmg > 1e-8


@pytest.mark.parametrize("scr", [(2, 5, 2), (4, 3, 2)])
def test_5_shapes_and_params(scr):
    cfg = ModelConfig(scr=scr)
    assert cfg.T == 256 and cfg.base_channels == 96
    assert stage_schedule(cfg) == [(96, 64), (192, 32), (384, 16)]
    model = build_model(cfg)
    trace = []
    out = model.forward(np.zeros((1, 3, cfg.M, cfg.T, cfg.V)), trace=trace)
    shapes = dict(trace)
    assert [shapes[k][1:3] for k in ("stage0", "stage1", "stage2")] == [(96, 64), (192, 32), (384, 16)]
    assert out.shape == (1, cfg.num_classes)
    for mechanism in Mx.MECHANISMS:
        m = build_model(ModelConfig(scr=scr, mechanism=mechanism))
        expected = oracles.analytic_param_count(96, scr, cfg.k_temporal, cfg.V, cfg.num_classes, mechanism)
        print(scr, mechanism, m.param_count())
        assert m.param_count() == expected


@pytest.fixture(scope="module")
def ablation():
    results = {}
    for seed in range(3):
        for mech in ("ds-smg", "smg", "none"):
            r = desk_scale.run(mech, seed)
            print(r)
            results[(mech, seed)] = r
    return results


@pytest.mark.slow
def test_6_desk_scale_learning(ablation):
    main = ablation[("ds-smg", 0)]
    assert main.epochs <= 100
    assert main.train_accuracy >= 0.95, main
    assert main.held_out_accuracy >= 0.80, main
    assert main.seconds < 30 * 60, main
    mean = {m: np.mean([ablation[(m, s)].held_out_accuracy for s in range(3)]) for m in ("ds-smg", "smg", "none")}
    print("mean held-out accuracy:", mean)
    assert mean["ds-smg"] >= mean["smg"] >= mean["none"], mean


def test_7_bench_harness(tmp_path, capsys):
    assert cli.main(["bench", "--reps", "5", "--out-dir", str(tmp_path)]) == cli.EXIT_OK
    rows = read_bench_csv(tmp_path / "bench.csv")
    shapes = {r["shape"] for r in rows}
    assert len(shapes) >= 4 and (128, 96, 64, 25, 3) in shapes
    assert {(r["formulation"], r["phase"]) for r in rows} == {
        (f, p) for f in ("baseline", "repeated") for p in ("forward", "backward")}
    assert all(int(r["reps"]) >= 5 for r in rows)
    report = (tmp_path / "bench_report.txt").read_text()
    line = next(ln for ln in report.splitlines() if ln.startswith("measured backward-time ratio"))
    print(line)
    assert "128x96x64x25x3=" in line


def test_8_training_mechanics():
    cfg = TrainConfig()
    assert lr_at(20, cfg) == 4e-3
    assert lr_at(160, cfg) == pytest.approx(2e-3, rel=0, abs=1e-18)
    assert lr_at(300, cfg) == pytest.approx(0.0, abs=1e-18)

    p = Tensor(np.ones(4))
    adamw_step([p], [np.zeros(4)], AdamWState.for_params([p]), 4e-3, cfg)
    np.testing.assert_allclose(p.data, 0.9998, rtol=0, atol=1e-15)

    model = build_model(ModelConfig(base_channels=4, scr=(1, 1, 1), T=16, V=4, M=1, num_classes=3))
    ema = EmaState({n: np.zeros(t.shape) for n, t in model.named_parameters()}, 0.9999)
    for _, t in model.named_parameters():
        t.data[...] = 1.0
    ema_update(ema, model)
    assert all(np.allclose(s, 1e-4, rtol=0, atol=1e-15) for s in ema.shadow.values())

    rng = np.random.default_rng(8)
    for _ in range(100):
        S, N, K = rng.integers(1, 5), rng.integers(1, 20), rng.integers(2, 10)
        logits = [rng.standard_normal((N, K)) * rng.uniform(0.1, 5) for _ in range(S)]
        w = rng.uniform(0.01, 2, S)
        base = fuse_scores(w, logits)
        np.testing.assert_array_equal(base, fuse_scores(w * rng.uniform(0.01, 100), logits))
        shifted = [z + rng.standard_normal((N, 1)) * 50 for z in logits]
        np.testing.assert_array_equal(base, fuse_scores(w, shifted))
