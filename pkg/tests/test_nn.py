import numpy as np
import pytest

from src.errors import GradientError, ShapeError
from src.nn import (AdamState, Parameter, Tensor, adam_step, compute_gradients, concat, conv_text_forward, dropout,
                    fc_forward, gather_rows, l1_loss, l2_loss, max_pool, mse_loss)
from src.nn.init import truncated_normal


def test_product_chain_gradients():
    x = Parameter(3.0, name='x')
    y = x * x
    z = y * y
    compute_gradients(z)
    assert x.grad == pytest.approx(4 * 3.0 ** 3)


def test_matmul_and_broadcast_bias():
    A = Parameter(np.arange(6.0).reshape(2, 3), name='A')
    B = Parameter(np.ones((3, 2)), name='B')
    b = Parameter(np.zeros(2), name='b')
    loss = (A @ B + b).sum()
    grads = compute_gradients(loss)
    np.testing.assert_array_equal(grads['A'], np.full((2, 3), 2.0))
    np.testing.assert_array_equal(grads['B'], np.repeat(A.data.sum(axis=0)[:, None], 2, axis=1))
    np.testing.assert_array_equal(grads['b'], [2.0, 2.0])


def test_shared_node_accumulates():
    x = Parameter(np.array([1.0, 2.0]), name='x')
    y = x + x
    compute_gradients((y * y).sum())
    np.testing.assert_array_equal(x.grad, 8 * x.data)


def test_detach_cuts_the_graph():
    x = Parameter(np.array([2.0]), name='x')
    w = Parameter(np.array([5.0]), name='w')
    loss = ((x * w).detach() * w).sum()
    compute_gradients(loss)
    assert x.grad[0] == 0.0
    assert w.grad[0] == 10.0


def test_compute_gradients_rejects_non_scalar():
    x = Parameter(np.ones(3), name='x')
    with pytest.raises(GradientError):
        compute_gradients(x * 2.0)


def test_compute_gradients_rejects_loss_without_forward():
    # a bare constant has no recorded graph to walk back through
    with pytest.raises(GradientError):
        compute_gradients(Tensor(1.0))


def test_constant_loss_from_a_forward_pass_gives_zero_gradients():
    w = Parameter(np.array([1.5, -2.0]), name='w')
    unused = Parameter(np.ones((2, 2)), name='unused')
    grads = compute_gradients((w * 0.0).sum(), [w, unused])
    np.testing.assert_array_equal(grads['w'], np.zeros(2))
    np.testing.assert_array_equal(grads['unused'], np.zeros((2, 2)))


def test_conv_matches_direct_sum():
    rng = np.random.default_rng(0)
    V = rng.normal(size=(5, 3))
    filters = Parameter(rng.normal(size=(2, 2, 3)), name='K')
    biases = Parameter(rng.normal(size=2), name='b')
    out = conv_text_forward(Tensor(V), filters, biases, activation='identity').data
    assert out.shape == (2, 4)
    for j in range(2):
        for s in range(4):
            expected = (V[s:s + 2] * filters.data[j]).sum() + biases.data[j]
            assert out[j, s] == pytest.approx(expected)


def test_conv_rejects_short_text():
    filters = Parameter(np.zeros((2, 3, 4)), name='K')
    with pytest.raises(ShapeError):
        conv_text_forward(Tensor(np.zeros((2, 4))), filters, Parameter(np.zeros(2), name='b'))


def test_max_pool_ties_go_to_first_index():
    features = Parameter(np.array([[1.0, 3.0, 3.0, 0.0]]), name='f')
    pooled, argmax = max_pool(features)
    assert pooled.data.tolist() == [3.0]
    assert argmax.tolist() == [1]
    compute_gradients(pooled.sum())
    np.testing.assert_array_equal(features.grad, [[0.0, 1.0, 0.0, 0.0]])


def test_pooled_encoding_ignores_where_the_text_sits():
    rng = np.random.default_rng(3)
    filters = Parameter(truncated_normal((4, 2, 3), 0.0, 0.1, rng), name='K')
    biases = Parameter(np.full(4, 0.1), name='b')
    W = Parameter(truncated_normal((4, 2), 0.0, 0.1, rng), name='W')
    g = Parameter(np.full(2, 0.1), name='g')
    segment = rng.uniform(-0.5, 0.5, size=(3, 3))
    encodings = []
    for offset in (2, 10):
        V = np.zeros((16, 3))  # PAD rows embed to zero
        V[offset:offset + 3] = segment
        pooled, _ = max_pool(conv_text_forward(Tensor(V), filters, biases))
        encodings.append(fc_forward(pooled, W, g).data)
    np.testing.assert_allclose(encodings[0], encodings[1], rtol=1e-12, atol=1e-15)


def test_fc_forward():
    O = Tensor(np.array([[1.0, -1.0]]))
    W = Parameter(np.array([[1.0, 2.0, 0.0], [0.5, 0.0, 1.0]]), name='W')
    g = Parameter(np.array([0.0, 0.1, 0.2]), name='g')
    np.testing.assert_allclose(fc_forward(O, W, g).data, np.tanh([[0.5, 2.1, -0.8]]))
    with pytest.raises(ShapeError):
        fc_forward(Tensor(np.ones((1, 3))), W, g)


def test_dropout_eval_and_keep_one_are_identity():
    x = Tensor(np.arange(4.0))
    assert dropout(x, 0.5, False, None)[0] is x
    assert dropout(x, 1.0, True, np.random.default_rng(0))[0] is x


def test_dropout_scales_kept_units():
    x = Tensor(np.ones(1000))
    out, mask = dropout(x, 0.5, True, np.random.default_rng(0))
    np.testing.assert_array_equal(out.data[mask.mask], 2.0)
    np.testing.assert_array_equal(out.data[~mask.mask], 0.0)


def test_dropout_is_unbiased_in_expectation():
    x = Tensor(np.array([1.0, -2.0, 0.5, 3.0]))
    rng = np.random.default_rng(0)
    draws = 10000
    total = sum(dropout(x, 0.8, True, rng)[0].data for _ in range(draws))
    np.testing.assert_allclose(total / draws, x.data, rtol=0.02)


@pytest.mark.parametrize('keep_prob', [0.0, -0.1, 1.5])
def test_dropout_rejects_bad_keep_prob(keep_prob):
    with pytest.raises(ValueError):
        dropout(Tensor(np.ones(2)), keep_prob, True, np.random.default_rng(0))


def test_l1_loss_value_and_zero_residual_subgradient():
    pred = Parameter(np.array([1.0, 3.0, 2.0]), name='p')
    loss = l1_loss(pred, [2.0, 1.0, 2.0])
    assert loss.item() == pytest.approx(1.0)
    compute_gradients(loss)
    np.testing.assert_allclose(pred.grad, [-1 / 3, 1 / 3, 0.0])


def test_l2_loss_forms():
    a = Parameter(np.array([[3.0, 4.0], [0.0, 0.0]]), name='a')
    b = np.zeros((2, 2))
    assert l2_loss(a, b, squared=True).item() == pytest.approx(12.5)
    assert l2_loss(a, b, squared=False).item() == pytest.approx(2.5)
    compute_gradients(l2_loss(a, b, squared=False))
    np.testing.assert_allclose(a.grad, [[0.3, 0.4], [0.0, 0.0]])


def test_mse_loss():
    pred = Parameter(np.array([1.0, 2.0]), name='p')
    assert mse_loss(pred, [2.0, 4.0]).item() == pytest.approx(2.5)


def test_concat_and_gather_rows_gradients():
    table = Parameter(np.arange(6.0).reshape(3, 2), name='t')
    rows = gather_rows(table, np.array([2, 0, 2]))
    out = concat([rows, Tensor(np.ones((3, 1)))])
    assert out.shape == (3, 3)
    compute_gradients(out.sum())
    np.testing.assert_array_equal(table.grad, [[1.0, 1.0], [0.0, 0.0], [2.0, 2.0]])


def test_adam_first_step_moves_by_lr():
    p = Parameter(np.array([1.0, -1.0, 0.5]), name='p')
    p.grad[...] = [0.3, -2.0, 0.0]
    state = AdamState()
    adam_step([p], state, lr=0.01)
    np.testing.assert_allclose(p.data, [0.99, -0.99, 0.5], atol=1e-7)
    assert state.timestep == 1
    assert not p.grad.any()


def test_adam_leaves_parameters_alone_under_zero_gradient():
    p = Parameter(np.array([0.25, -1.0, 2.0]), name='p')
    state = AdamState()
    for _ in range(3):
        adam_step([p], state, lr=0.1)
    np.testing.assert_array_equal(p.data, [0.25, -1.0, 2.0])
    assert state.timestep == 3


def test_adam_skips_frozen_parameters():
    p = Parameter(np.ones(2), name='p', frozen=True)
    p.grad[...] = 1.0
    adam_step([p], AdamState(), lr=0.1)
    np.testing.assert_array_equal(p.data, [1.0, 1.0])


def test_adam_bias_correction_over_steps():
    p = Parameter(np.array([0.0]), name='p')
    state = AdamState()
    for _ in range(3):
        p.grad[...] = 1.0
        adam_step([p], state, lr=0.1)
    # constant gradient: every bias-corrected step has size lr
    assert p.data[0] == pytest.approx(-0.3, abs=1e-6)


def test_truncated_normal_stays_within_two_sigma():
    values = truncated_normal((10000,), 0.0, 0.1, np.random.default_rng(0))
    assert np.abs(values).max() <= 0.2
    assert abs(values.std() - 0.088) < 0.01
