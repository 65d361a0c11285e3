import math

import numpy as np
import pytest

from tsgcnext import engine as E
from tsgcnext.engine import Tensor
from tsgcnext.exceptions import DimensionError, InputError, UsageError

import oracles


def leaf(a):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


# -- tape mechanics ----------------------------------------------------------------


def test_backward_simple_chain():
    x = leaf([1.0, 2.0, 3.0])
    y = (x * x + 2.0 * x).sum()
    E.backward(y)
    np.testing.assert_allclose(x.grad, 2 * x.data + 2.0)


def test_backward_rejects_non_scalar():
    x = leaf(np.ones(3))
    with pytest.raises(UsageError):
        E.backward(x * 2.0)


def test_backward_rejects_disconnected_loss():
    with pytest.raises(UsageError):
        E.backward(Tensor(np.ones(1)).sum())


def test_grads_accumulate_across_calls():
    x = leaf([1.0, -1.0])
    E.backward((x * 3.0).sum())
    E.backward((x * 3.0).sum())
    np.testing.assert_allclose(x.grad, [6.0, 6.0])


def test_shared_subexpression_gets_both_paths():
    x = leaf([2.0])
    h = x * x
    E.backward((h + h * x).sum())
    # d/dx (x^2 + x^3) = 2x + 3x^2
    np.testing.assert_allclose(x.grad, [4.0 + 12.0])


def test_intermediates_keep_no_grad_buffer():
    x = leaf(np.ones(3))
    h = x * 2.0
    E.backward(h.sum())
    assert h.grad is None and x.grad is not None


def test_unused_leaf_gets_zero_grad():
    x, z = leaf([1.0]), leaf([5.0])
    E.backward(E.add(x, E.mul(z, Tensor(np.zeros(1)))).sum())
    np.testing.assert_allclose(z.grad, [0.0])


def test_no_grad_records_nothing():
    x = leaf(np.ones(2))
    with E.no_grad():
        y = x * 2.0
    assert y.op is None and not y.requires_grad


def test_tape_orders_by_execution():
    x = leaf(np.ones((2, 2)))
    y = E.tsum(E.gelu(E.mul(x, x)))
    assert E.Tape.record(y).ops == ["mul", "gelu", "sum"]


def test_broadcast_gradients_unbroadcast(rng):
    a, b = leaf(rng.standard_normal((2, 3, 4))), leaf(rng.standard_normal((3, 1)))
    E.backward(E.mul(a, b).sum())
    assert b.grad.shape == (3, 1)
    np.testing.assert_allclose(b.grad, a.data.sum(axis=(0, 2))[:, None])


# -- seeds and determinism ---------------------------------------------------------


def test_seed_stream_is_keyed_not_sequential():
    s = E.SeedStream(7)
    a1 = s.generator("drop_path", 3, 10).random(4)
    s.generator("dropout", 10).random(100)
    a2 = s.generator("drop_path", 3, 10).random(4)
    np.testing.assert_array_equal(a1, a2)
    assert not np.array_equal(a1, s.generator("drop_path", 4, 10).random(4))
    assert not np.array_equal(a1, E.SeedStream(8).generator("drop_path", 3, 10).random(4))


def test_deterministic_context_restores():
    assert not E.is_deterministic()
    with E.deterministic():
        assert E.is_deterministic()
    assert not E.is_deterministic()


# -- primitive values against loop oracles -----------------------------------------


def test_pointwise_conv_matches_loops(rng):
    x, w, b = rng.standard_normal((2, 3, 4, 5)), rng.standard_normal((3, 6)), rng.standard_normal(6)
    out = E.pointwise_conv(Tensor(x), Tensor(w), Tensor(b)).data
    np.testing.assert_allclose(out, oracles.pointwise_loops(x, w, b), atol=1e-12)


def test_pointwise_conv_shape_errors():
    with pytest.raises(DimensionError):
        E.pointwise_conv(Tensor(np.ones((1, 3, 2, 2))), Tensor(np.ones((4, 2))))


@pytest.mark.parametrize("k", [1, 3, 5])
def test_depthwise_same_matches_loops(rng, k):
    x, w = rng.standard_normal((2, 3, 7, 2)), rng.standard_normal((3, k))
    out = E.depthwise_temporal_conv(Tensor(x), Tensor(w), 1, "same").data
    np.testing.assert_allclose(out, oracles.depthwise_same_loops(x, w), atol=1e-12)


def test_depthwise_rejects_even_kernel_with_same_padding():
    with pytest.raises(DimensionError):
        E.depthwise_temporal_conv(Tensor(np.ones((1, 2, 4, 1))), Tensor(np.ones((2, 2))), 1, "same")


def test_depthwise_strided_valid():
    x = np.arange(8.0).reshape(1, 1, 8, 1)
    out = E.depthwise_temporal_conv(Tensor(x), Tensor(np.array([[1.0, 1.0]])), 2, "none").data
    np.testing.assert_allclose(out.ravel(), [1.0, 5.0, 9.0, 13.0])


def test_temporal_patch_conv_is_non_overlapping(rng):
    x = rng.standard_normal((1, 3, 8, 2))
    w = rng.standard_normal((3, 4, 5))
    out = E.temporal_patch_conv(Tensor(x), Tensor(w)).data
    assert out.shape == (1, 5, 2, 2)
    ref = np.einsum("ijv,ijo->ov", x[0, :, 4:8, :], w)
    np.testing.assert_allclose(out[0, :, 1, :], ref, atol=1e-12)


def test_layer_norm_matches_loops(rng):
    x, g, b = rng.standard_normal((2, 4, 3, 2)), rng.standard_normal(4), rng.standard_normal(4)
    out = E.layer_norm_channel(Tensor(x), Tensor(g), Tensor(b), 1e-6).data
    np.testing.assert_allclose(out, oracles.layer_norm_loops(x, g, b, 1e-6), atol=1e-12)


def test_gelu_exact_values():
    xs = np.array([-3.0, -1.0, 0.0, 0.5, 2.0, 8.0])
    out = E.gelu(Tensor(xs)).data
    np.testing.assert_allclose(out, [oracles.gelu_scalar(v) for v in xs], atol=1e-15)
    assert out[2] == 0.0


def test_softmax_rows_sum_to_one(rng):
    y = E.softmax(Tensor(rng.standard_normal((3, 5)) * 50)).data
    np.testing.assert_allclose(y.sum(axis=1), 1.0)


def test_cross_entropy_without_smoothing_is_nll():
    z = np.array([[2.0, 0.0, -1.0]])
    loss = E.smoothed_cross_entropy(Tensor(z), [0], 0.0).item()
    assert loss == pytest.approx(-(2.0 - math.log(math.exp(2) + 1 + math.exp(-1))), abs=1e-14)


def test_cross_entropy_uniform_logits_is_log_k():
    loss = E.smoothed_cross_entropy(Tensor(np.zeros((4, 7))), [0, 1, 2, 3], 0.1).item()
    assert loss == pytest.approx(math.log(7), abs=1e-14)


def test_cross_entropy_label_errors():
    with pytest.raises(InputError):
        E.smoothed_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])
    with pytest.raises(DimensionError):
        E.smoothed_cross_entropy(Tensor(np.zeros((2, 3))), [0])


def test_drop_path_modes(rng):
    x = Tensor(rng.standard_normal((4, 2, 3, 3)))
    assert E.drop_path(x, 0.3, False) is x
    assert E.drop_path(x, 0.0, True) is x
    assert np.all(E.drop_path(x, 1.0, True, rng).data == 0)
    with pytest.raises(InputError):
        E.drop_path(x, 1.5, True, rng)


def test_drop_path_masks_whole_samples_and_rescales():
    x = Tensor(np.ones((4000, 2, 1, 1)))
    out = E.drop_path(x, 0.25, True, np.random.default_rng(0)).data
    per_sample = out.reshape(4000, -1)
    assert np.all(per_sample.min(axis=1) == per_sample.max(axis=1))
    assert set(np.unique(per_sample)) <= {0.0, 1.0 / 0.75}
    assert per_sample.mean() == pytest.approx(1.0, abs=0.05)


def test_dropout_expectation():
    out = E.dropout(Tensor(np.ones((200, 200))), 0.4, True, np.random.default_rng(1)).data
    assert out.mean() == pytest.approx(1.0, abs=0.02)
    with pytest.raises(InputError):
        E.dropout(Tensor(np.ones(2)), 1.0, True, np.random.default_rng(1))


def test_mean_persons_requires_multiple():
    with pytest.raises(DimensionError):
        E.mean_persons(Tensor(np.ones((3, 2))), 2)
    out = E.mean_persons(Tensor(np.arange(8.0).reshape(4, 2)), 2).data
    np.testing.assert_allclose(out, [[1.0, 2.0], [5.0, 6.0]])


def test_split_and_concat_round_trip(rng):
    x = Tensor(rng.standard_normal((2, 7, 3)))
    parts = E.split(x, [3, 4], axis=1)
    np.testing.assert_array_equal(E.concat(parts, axis=1).data, x.data)


def test_composite_gradient_matches_finite_differences(rng):
    x0, w0 = rng.standard_normal((2, 3, 4, 2)), rng.standard_normal((3, 5))

    def f_np(x):
        with E.no_grad():
            h = E.gelu(E.pointwise_conv(Tensor(x), Tensor(w0)))
            return float(E.tmean(E.mul(h, h)).item())

    x = leaf(x0)
    h = E.gelu(E.pointwise_conv(x, Tensor(w0)))
    E.backward(E.tmean(E.mul(h, h)))
    num = oracles.finite_difference(f_np, x0.copy())
    np.testing.assert_allclose(x.grad, num, rtol=1e-6, atol=1e-9)


def test_parameters_of_skips_static_fields():
    from dataclasses import dataclass, field

    @dataclass
    class P:
        w: Tensor
        rate: float = field(default=0.1, metadata={"static": True})
        sub: list = field(default_factory=list)

    p = P(Tensor(np.ones(2)), sub=[Tensor(np.ones(1))])
    assert [n for n, _ in E.parameters_of(p)] == ["w", "sub.0"]
