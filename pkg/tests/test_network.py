import numpy as np
import pytest

from tsgcnext import engine as E
from tsgcnext.exceptions import ConfigError, DimensionError, ParseError
from tsgcnext.network import (ModelConfig, build_model, decays, load_checkpoint, parse_scr, read_checkpoint,
                              save_checkpoint, stage_schedule)

import oracles

TINY = dict(base_channels=4, scr=(1, 1, 1), T=16, V=5, M=2, num_classes=3)


def tiny(**kw):
    return ModelConfig(**{**TINY, **kw})


def test_parse_scr_forms():
    assert parse_scr("2:5:2") == (2, 5, 2)
    assert parse_scr([4, 3, 2]) == (4, 3, 2)
    with pytest.raises(ConfigError):
        parse_scr("2:5")
    with pytest.raises(ConfigError):
        parse_scr("a:b:c")


def test_config_violations_are_collected():
    cfg = ModelConfig(T=30, k_temporal=4, mechanism="gat", num_classes=1)
    with pytest.raises(ConfigError) as exc:
        cfg.validate()
    assert len(exc.value.violations) == 4


def test_config_dict_round_trip():
    cfg = tiny(parents=(0, 0, 1, 2, 3))
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"bogus": 1})


@pytest.mark.parametrize("scr", [(2, 5, 2), (4, 3, 2)])
def test_default_schedule(scr):
    assert stage_schedule(ModelConfig(scr=scr)) == [(96, 64), (192, 32), (384, 16)]


@pytest.mark.parametrize("mechanism", ["ds-smg", "smg", "classical", "none"])
@pytest.mark.parametrize("scr", [(2, 5, 2), (1, 2, 1)])
def test_param_count_matches_analytic(mechanism, scr):
    cfg = tiny(scr=scr, mechanism=mechanism)
    assert build_model(cfg).param_count() == oracles.analytic_param_count(4, scr, 3, 5, 3, mechanism)


def test_forward_trace_shapes():
    m = build_model(tiny())
    trace = []
    out = m.forward(np.zeros((2, 3, 2, 16, 5)), trace=trace)
    assert out.shape == (2, 3)
    assert dict(trace) == {"stem": (4, 4, 4, 5), "stage0": (4, 4, 4, 5), "down1": (4, 8, 2, 5),
                           "stage1": (4, 8, 2, 5), "down2": (4, 16, 1, 5), "stage2": (4, 16, 1, 5),
                           "logits": (2, 3)}


def test_forward_rejects_wrong_shape():
    m = build_model(tiny())
    with pytest.raises(DimensionError):
        m.forward(np.zeros((2, 3, 1, 16, 5)))


def test_person_order_does_not_matter(rng):
    m = build_model(tiny())
    x = rng.standard_normal((2, 3, 2, 16, 5))
    np.testing.assert_allclose(m.forward(x).data, m.forward(x[:, :, ::-1]).data, atol=1e-12)


def test_eval_forward_is_deterministic_and_training_uses_seeds(rng):
    m = build_model(tiny(dropout=0.4))
    x = rng.standard_normal((3, 3, 2, 16, 5))
    np.testing.assert_array_equal(m.forward(x).data, m.forward(x).data)
    s = E.SeedStream(1)
    a = m.forward(x, training=True, step=0, seeds=s).data
    b = m.forward(x, training=True, step=0, seeds=s).data
    c = m.forward(x, training=True, step=1, seeds=s).data
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_formulations_give_same_gradients(rng):
    x = rng.standard_normal((2, 3, 2, 16, 5))
    grads = []
    for form in ("baseline", "repeated"):
        m = build_model(tiny())
        for _, t in m.named_parameters():
            if "layer_scale" in _:
                t.data[:] = 0.5
        E.backward(E.smoothed_cross_entropy(m.forward(x, formulation=form), [0, 2]))
        grads.append({n: t.grad for n, t in m.named_parameters()})
    for name in grads[0]:
        np.testing.assert_allclose(grads[0][name], grads[1][name], atol=1e-12, err_msg=name)


def test_drop_path_ramp():
    m = build_model(ModelConfig(base_channels=4, scr=(2, 5, 2), T=16, V=3, num_classes=2))
    rates = [b.drop_path for b in m.blocks]
    assert rates[0] == 0.0 and rates[-1] == pytest.approx(0.1)
    assert np.all(np.diff(rates) > 0)


def test_init_is_seeded():
    a, b, c = build_model(tiny(), 3), build_model(tiny(), 3), build_model(tiny(), 4)
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(np.array_equal(sa[k], sb[k]) for k in sa)
    assert not all(np.array_equal(sa[k], sc[k]) for k in sa)


def test_adjacency_initialised_from_graph():
    m = build_model(tiny())
    a = m.blocks[0].mixer.adjacency.values.data
    np.testing.assert_array_equal(a[:, :, 0], np.eye(5))
    assert m.blocks[0].mixer.adjacency.values.requires_grad


def test_checkpoint_round_trip(tmp_path, rng):
    m = build_model(tiny(scr=(1, 2, 1)), seed=9)
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, m, {"note": "x"})
    back, meta = load_checkpoint(p)
    assert meta == {"note": "x"} and back.cfg == m.cfg
    x = rng.standard_normal((1, 3, 2, 16, 5))
    np.testing.assert_array_equal(back.forward(x).data, m.forward(x).data)


def test_checkpoint_corruption(tmp_path):
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, build_model(tiny()))
    buf = p.read_bytes()
    (tmp_path / "t.ckpt").write_bytes(buf[:-10])
    with pytest.raises(ParseError):
        read_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "v.ckpt").write_bytes(buf[:4] + b"\x09\0\0\0" + buf[8:])
    with pytest.raises(ParseError, match="version"):
        read_checkpoint(tmp_path / "v.ckpt")


def test_load_state_dict_checks_shapes():
    m = build_model(tiny())
    state = m.state_dict()
    state["head.w"] = np.zeros((1, 1))
    with pytest.raises(DimensionError):
        m.load_state_dict(state)


def test_decay_mask():
    assert decays("stages.0.0.mixer.expand_w")
    assert decays("head.w")
    assert not decays("stages.0.0.mixer.adjacency.values")
    assert not decays("stages.0.0.mixer.layer_scale")
    assert not decays("head.b") and not decays("stem.ln_g")
