import numpy as np
import pytest

from ..app.autograd import Tensor, cross_entropy, scatter_rows


def numeric_grad(fn, x, h=1e-6):
    grad = np.zeros_like(x)
    for index in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[index] += h
        down[index] -= h
        grad[index] = (fn(up) - fn(down)) / (2 * h)
    return grad


def test_matmul_and_sum_gradient(rng):
    """d/dA sum(A @ B) equals row sums of B broadcast"""
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = rng.normal(size=(4, 2))
    (a @ b).sum().backward()
    np.testing.assert_allclose(a.grad, np.tile(b.sum(axis=1), (3, 1)))


def test_broadcast_add_reduces_gradient(rng):
    """A bias broadcast over rows collects the summed gradient"""
    x = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    bias = Tensor(np.zeros(3), requires_grad=True)
    (x + bias).sum().backward()
    np.testing.assert_allclose(bias.grad, np.full(3, 5.0))


def test_silu_gradient_matches_finite_differences(rng):
    """SiLU backward agrees with central differences"""
    x0 = rng.normal(size=(2, 3))
    x = Tensor(x0, requires_grad=True)
    x.silu().sum().backward()
    expected = numeric_grad(lambda v: float((v / (1 + np.exp(-v))).sum()), x0)
    np.testing.assert_allclose(x.grad, expected, rtol=1e-6, atol=1e-8)


def test_softmax_gradient_matches_finite_differences(rng):
    """Softmax backward agrees with central differences"""
    x0 = rng.normal(size=(2, 4))
    weights = rng.normal(size=(2, 4))
    x = Tensor(x0, requires_grad=True)
    (x.softmax(axis=-1) * weights).sum().backward()

    def loss(v):
        e = np.exp(v - v.max(axis=-1, keepdims=True))
        return float((e / e.sum(axis=-1, keepdims=True) * weights).sum())

    np.testing.assert_allclose(x.grad, numeric_grad(loss, x0), rtol=1e-6, atol=1e-8)


def test_cross_entropy_gradient(rng):
    """Mean NLL gradient is (softmax - onehot) / T"""
    logits0 = rng.normal(size=(3, 5))
    targets = np.array([0, 4, 2])
    logits = Tensor(logits0, requires_grad=True)
    cross_entropy(logits, targets).backward()
    probs = np.exp(logits0) / np.exp(logits0).sum(axis=1, keepdims=True)
    probs[np.arange(3), targets] -= 1.0
    np.testing.assert_allclose(logits.grad, probs / 3, rtol=1e-10)


def test_repeated_gather_accumulates(rng):
    """Indexing the same row twice doubles its gradient"""
    table = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    table[np.array([1, 1, 3])].sum().backward()
    np.testing.assert_allclose(table.grad, [[0, 0], [2, 2], [0, 0], [1, 1]])


def test_scatter_rows_roundtrip(rng):
    """Scattered rows land in place and gradients flow back to them"""
    src = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    out = scatter_rows(src, [0, 2], 4)
    np.testing.assert_allclose(out.data[[0, 2]], src.data)
    assert not out.data[[1, 3]].any()
    (out * np.arange(4.0)[:, None]).sum().backward()
    np.testing.assert_allclose(src.grad, [[0, 0, 0], [2, 2, 2]])


def test_shared_subexpression_gradient():
    """A tensor used twice receives both contributions"""
    x = Tensor(np.array(3.0), requires_grad=True)
    (x * x + x).backward()
    assert float(x.grad) == pytest.approx(7.0)


def test_backward_requires_scalar(rng):
    """Non-scalar outputs cannot start backward"""
    with pytest.raises(ValueError):
        Tensor(rng.normal(size=3), requires_grad=True).silu().backward()


def test_ndarray_left_operand_defers_to_tensor(rng):
    """ndarray @ Tensor and ndarray * Tensor build graph nodes"""
    a = rng.normal(size=(2, 3))
    w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    out = a @ w
    assert isinstance(out, Tensor)
    out.sum().backward()
    np.testing.assert_allclose(w.grad, np.tile(a.sum(axis=0)[:, None], (1, 2)))

    scale = Tensor(np.ones(3), requires_grad=True)
    product = a * scale
    assert isinstance(product, Tensor)
    product.sum().backward()
    np.testing.assert_allclose(scale.grad, a.sum(axis=0))
