"""Finite-difference checks for every layer's backward pass, plus masking."""

import numpy as np
import pytest

from songdisc import nn

from gradcheck import numeric_grad, rel_err

B, C, T = 2, 6, 7
LENGTHS = np.array([7, 5])


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def check_layer(layer, fwd, rng, arrays):
    """FD-check input and parameter grads of a scalar probe sum(fwd() * r)."""
    y0 = fwd()
    r = rng.standard_normal(y0.shape)

    def loss():
        return float(np.sum(fwd() * r))

    dy = r.copy()
    dx = layer.backward(dy)
    for name, arr, analytic in arrays(dx):
        num = numeric_grad(loss, arr)
        assert rel_err(analytic, num) < 1e-6, name
    for name, p in layer.params():
        p.grad[:] = 0.0
    loss()  # restore cache
    layer.backward(dy)
    for name, p in layer.params():
        num = numeric_grad(loss, p.value)
        assert rel_err(p.grad, num) < 1e-6, name


def test_conv1d_grads(rng):
    x = rng.standard_normal((B, C, T))
    mask = nn.make_mask(LENGTHS, T)
    x *= mask
    layer = nn.Conv1d(C, 4, 3, rng)
    check_layer(layer, lambda: layer.forward(x, mask), rng,
                lambda dx: [("x", x, dx)])


def test_linear_grads(rng):
    x = rng.standard_normal((3, C))
    layer = nn.Linear(C, 4, rng)
    check_layer(layer, lambda: layer.forward(x), rng,
                lambda dx: [("x", x, dx)])


def test_batchnorm_grads_training(rng):
    x = rng.standard_normal((B, C, T))
    mask = nn.make_mask(LENGTHS, T)
    x *= mask
    layer = nn.BatchNorm1d(C)
    layer.gamma.value[:] = rng.uniform(0.5, 1.5, C)
    layer.beta.value[:] = rng.standard_normal(C)
    check_layer(layer,
                lambda: layer.forward(x, mask, training=True, update_stats=False),
                rng, lambda dx: [("x", x, dx)])


def test_batchnorm_eval_uses_running_stats(rng):
    x = rng.standard_normal((B, C, T))
    mask = nn.make_mask(LENGTHS, T)
    layer = nn.BatchNorm1d(C)
    layer.set_buffers(rng.standard_normal(C), rng.uniform(0.5, 2.0, C))
    y1 = layer.forward(x, mask, training=False)
    y2 = layer.forward(x[:1], mask[:1], training=False)
    assert np.array_equal(y1[:1], y2)


def test_layernorm_grads(rng):
    x = rng.standard_normal((B, C, T))
    mask = nn.make_mask(LENGTHS, T)
    x *= mask
    layer = nn.LayerNorm(C)
    layer.gamma.value[:] = rng.uniform(0.5, 1.5, C)
    check_layer(layer, lambda: layer.forward(x, mask), rng,
                lambda dx: [("x", x, dx)])


def test_avgpool_grads_and_lengths(rng):
    x = rng.standard_normal((B, C, T))
    mask = nn.make_mask(LENGTHS, T)
    x *= mask
    layer = nn.AvgPool2()
    y, new_mask, new_lengths = layer.forward(x, mask, LENGTHS)
    assert y.shape == (B, C, 4)
    assert list(new_lengths) == [4, 3]
    check_layer(layer, lambda: layer.forward(x, mask, LENGTHS)[0], rng,
                lambda dx: [("x", x, dx)])


def test_avgpool_odd_tail_averages_single_frame(rng):
    x = np.zeros((1, 1, 5))
    x[0, 0] = [2.0, 4.0, 6.0, 8.0, 10.0]
    y, _, nl = nn.AvgPool2().forward(x, nn.make_mask(np.array([5]), 5), np.array([5]))
    assert np.allclose(y[0, 0], [3.0, 7.0, 10.0])
    assert nl[0] == 3


def test_attention_grads(rng):
    x = rng.standard_normal((B, C, T))
    mask = nn.make_mask(LENGTHS, T)
    x *= mask
    layer = nn.SelfAttention(C, 2, rng)
    check_layer(layer, lambda: layer.forward(x, mask), rng,
                lambda dx: [("x", x, dx)])


def test_attention_block_grads(rng):
    x = rng.standard_normal((B, C, T))
    mask = nn.make_mask(LENGTHS, T)
    x *= mask
    layer = nn.AttentionBlock(C, 2, rng)
    check_layer(layer, lambda: layer.forward(x, mask), rng,
                lambda dx: [("x", x, dx)])


def test_masked_mean_pool_grads(rng):
    x = rng.standard_normal((B, C, T))
    mask = nn.make_mask(LENGTHS, T)
    x *= mask
    layer = nn.MaskedMeanPool()
    check_layer(layer, lambda: layer.forward(x, mask, LENGTHS), rng,
                lambda dx: [("x", x, dx)])


def test_clamp_logvar_limits_and_grad(rng):
    x = np.array([-12.0, -3.0, 0.0, 3.0, 12.0])
    layer = nn.ClampLogVar()
    y = layer.forward(x)
    assert np.allclose(y, [-10.0, -3.0, 0.0, 3.0, 10.0])
    dx = layer.backward(np.ones_like(x))
    assert np.allclose(dx, [0.0, 1.0, 1.0, 1.0, 0.0])


def test_positional_encoding_shape_and_range():
    pe = nn.positional_encoding(8, 16)
    assert pe.shape == (8, 16)
    assert np.all(np.abs(pe) <= 1.0)
    assert np.allclose(pe[0, 0], 0.0) and np.allclose(pe[1, 0], 1.0)


def test_attention_padded_keys_do_not_leak(rng):
    """Batch forward equals single-sample forward for the shorter song."""
    x = rng.standard_normal((B, C, T))
    mask = nn.make_mask(LENGTHS, T)
    x *= mask
    layer = nn.SelfAttention(C, 2, rng)
    y_batch = layer.forward(x, mask)
    t1 = LENGTHS[1]
    x1 = x[1:2, :, :t1]
    y_single = layer.forward(x1, nn.make_mask(LENGTHS[1:], t1))
    assert np.allclose(y_batch[1, :, :t1], y_single[0], atol=1e-10)
    assert np.all(y_batch[1, :, t1:] == 0.0)
