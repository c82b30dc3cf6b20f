import numpy as np
import pytest

from ssir import autodiff as ad
from ssir.autodiff import Tensor, grad_check
from ssir.errors import ShapeError

rng = np.random.default_rng(0)
TOL = 1e-7


def t(*shape, scale=1.0):
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True)


def weighted(y):
    # fixed random projection so every output coordinate contributes
    w = np.random.default_rng(hash(y.shape) % 2**32).normal(size=y.shape)
    return ad.tsum(y * Tensor(w))


@pytest.mark.parametrize("fn", [
    lambda x: x * x + x,
    lambda x: ad.relu(x) * 3.0,
    lambda x: ad.exp(x * 0.5),
    lambda x: ad.log(x * x + 1.0),
    lambda x: ad.tanh(x),
    lambda x: ad.mean(x, axis=1, keepdims=True) - x,
    lambda x: ad.transpose(x, (1, 0)).reshape(-1),
    lambda x: x[1:, ::2],
    lambda x: ad.concat([x, x * 2.0], axis=0),
    lambda x: ad.softmax(x, axis=-1),
    lambda x: ad.log_softmax(x, axis=0),
    lambda x: x - 1.0,
    lambda x: 1.0 - x,
])
def test_elementwise_and_shape_grads(fn):
    x = t(4, 6)
    assert grad_check(lambda v: weighted(fn(v)), x) < TOL


def test_broadcast_add_and_mul_grads():
    a, b = t(3, 4), t(4)
    assert grad_check(lambda v: weighted(v * b + b), a) < TOL
    assert grad_check(lambda v: weighted(a * v + v), b) < TOL


def test_matmul_and_linear_grads():
    a, b, bias = t(2, 3, 4), t(4, 5), t(5)
    assert grad_check(lambda v: weighted(ad.matmul(v, b)), a) < TOL
    assert grad_check(lambda v: weighted(ad.matmul(a, v)), b) < TOL
    assert grad_check(lambda v: weighted(ad.linear(a, v, bias)), b) < TOL
    assert grad_check(lambda v: weighted(ad.linear(a, b, v)), bias) < TOL
    np.testing.assert_allclose(ad.linear(a, b, bias).data, a.data @ b.data + bias.data)


def conv_oracle(x, w, b, stride, padding):
    bsz, t_len, cin = x.shape
    cout, _, k = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (0, 0)))
    t_out = (t_len + 2 * padding - k) // stride + 1
    out = np.zeros((bsz, t_out, cout))
    for n in range(bsz):
        for o in range(t_out):
            for c in range(cout):
                out[n, o, c] = b[c] + sum(w[c, i, j] * xp[n, o * stride + j, i]
                                          for i in range(cin) for j in range(k))
    return out


@pytest.mark.parametrize("stride,padding", [(1, 2), (2, 2), (1, 0), (3, 1)])
def test_conv1d_matches_loop_oracle(stride, padding):
    x, w, b = t(2, 11, 3), t(4, 3, 5), t(4)
    y = ad.conv1d(x, w, b, stride, padding)
    np.testing.assert_allclose(y.data, conv_oracle(x.data, w.data, b.data, stride, padding),
                               atol=1e-12)
    for target in (x, w, b):
        def f(v, target=target):
            args = [v if target is a else a for a in (x, w, b)]
            return weighted(ad.conv1d(*args, stride=stride, padding=padding))
        assert grad_check(f, target) < TOL


def test_conv1d_shape_errors():
    with pytest.raises(ShapeError):
        ad.conv1d(t(1, 5, 3), t(2, 4, 3))
    with pytest.raises(ShapeError):
        ad.conv1d(t(1, 2, 3), t(2, 3, 5))


def test_batchnorm_train_statistics_and_grads():
    x = Tensor(rng.normal(3, 2, size=(4, 10, 5)), requires_grad=True)
    gamma, beta = Tensor(np.ones(5), True), Tensor(np.zeros(5), True)
    rm, rv = np.zeros(5), np.ones(5)
    y = ad.batchnorm1d(x, gamma, beta, rm, rv, True, momentum=0.1)
    flat = y.data.reshape(-1, 5)
    np.testing.assert_allclose(flat.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(flat.std(axis=0), 1, atol=1e-5)
    ref = x.data.reshape(-1, 5)
    np.testing.assert_allclose(rm, 0.1 * ref.mean(axis=0))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * ref.var(axis=0, ddof=1))

    g2, b2 = t(5), t(5)
    for target in (x, g2, b2):
        def f(v, target=target):
            xx, gg, bb = [v if target is a else a for a in (x, g2, b2)]
            return weighted(ad.batchnorm1d(xx, gg, bb, np.zeros(5), np.ones(5), True))
        assert grad_check(f, target) < TOL


def test_batchnorm_eval_uses_running_stats():
    x = t(2, 3, 4)
    rm, rv = rng.normal(size=4), rng.uniform(0.5, 2, size=4)
    y = ad.batchnorm1d(x, Tensor(np.ones(4)), Tensor(np.zeros(4)), rm.copy(), rv.copy(), False)
    np.testing.assert_allclose(y.data, (x.data - rm) / np.sqrt(rv + 1e-5))
    assert grad_check(lambda v: weighted(ad.batchnorm1d(
        v, Tensor(np.ones(4)), Tensor(np.zeros(4)), rm, rv, False)), x) < TOL


def test_layernorm_grads():
    x, g, b = t(3, 4, 6), t(6), t(6)
    for target in (x, g, b):
        def f(v, target=target):
            xx, gg, bb = [v if target is a else a for a in (x, g, b)]
            return weighted(ad.layernorm(xx, gg, bb))
        assert grad_check(f, target) < TOL


def test_masked_softmax_equals_softmax_on_subset():
    x = t(5, 5)
    mask = np.abs(np.arange(5)[:, None] - np.arange(5)[None, :]) <= 1
    y = ad.softmax(x, mask=mask).data
    for r in range(5):
        idx = np.nonzero(mask[r])[0]
        e = np.exp(x.data[r, idx] - x.data[r, idx].max())
        np.testing.assert_allclose(y[r, idx], e / e.sum())
        assert np.all(y[r, ~mask[r]] == 0)
    assert grad_check(lambda v: weighted(ad.softmax(v, mask=mask)), x) < TOL


def test_cross_entropy_value_and_grad():
    logits = t(6, 4)
    targets = rng.integers(0, 4, size=6)
    ce = ad.cross_entropy(logits, targets)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ls = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    assert float(ce.data) == pytest.approx(-ls[np.arange(6), targets].mean())
    assert grad_check(lambda v: ad.cross_entropy(v, targets), logits) < TOL


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = x * x
    (y * y + y).sum().backward()
    # d/dx (x^4 + x^2) = 4x^3 + 2x
    assert x.grad[0] == pytest.approx(36.0)


def test_deep_graph_backward_is_iterative():
    x = Tensor(np.ones(3), requires_grad=True)
    y = x
    for _ in range(5000):
        y = y + 0.0
    y.sum().backward()
    np.testing.assert_array_equal(x.grad, 1.0)


def test_custom_op():
    x = t(3)
    y = ad.custom_op((x.data ** 2).sum(), x, lambda g: 2 * g * x.data)
    y.backward()
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_dropout_rate_and_scale():
    x = Tensor(np.ones((200, 200)), requires_grad=True)
    y = ad.dropout(x, 0.25, np.random.default_rng(1))
    kept = y.data > 0
    assert abs(kept.mean() - 0.75) < 0.01
    assert abs(y.data.mean() - 1.0) < 0.01
    assert ad.dropout(x, 0.25, np.random.default_rng(1), train=False) is x
    y.sum().backward()
    np.testing.assert_array_equal(x.grad, y.data)


def test_broadcast_shape_error():
    with pytest.raises(ShapeError):
        t(3, 4) + t(5)
    with pytest.raises(ShapeError):
        ad.matmul(t(3, 4), t(5, 2))
