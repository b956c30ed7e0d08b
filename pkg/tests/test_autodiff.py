import numpy as np
import pytest

from interlace.autodiff import (
    DegenerateMaskError,
    ShapeError,
    Tensor,
    bmm,
    concat,
    gradcheck,
    init_uniform,
    layer_norm_rows,
    logsumexp_rows,
    matmul,
    no_grad,
    relu,
    segment_mean,
    softmax_rows,
    softplus,
    tmean,
    tsum,
)
from interlace.autodiff import exp as texp, log as tlog


def scalarize(fn):
    """Wrap a tensor-valued fn into a scalar one with a non-uniform weighting
    so transposes and reshapes are not trivially invariant."""
    def inner(*inputs):
        out = fn(*inputs)
        ramp = np.linspace(0.5, 1.5, out.data.size).reshape(out.data.shape)
        return tsum(out * Tensor(ramp))
    return inner


def test_linear_gradient():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = x * 3.0
    y.backward()
    assert x.grad[0] == pytest.approx(3.0, abs=1e-12)
    r = gradcheck(lambda t: t * 3.0, [Tensor(np.array([2.0]), requires_grad=True)],
                  tol=1e-6)
    assert r.passed


def test_constant_has_zero_gradient():
    x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    c = Tensor(np.array([5.0, 5.0]))
    out = tsum(x * 0.0 + c)
    out.backward()
    assert np.all(x.grad == 0.0)


def test_softmax_cross_entropy_gradient():
    # grad of -log softmax(logits)[0] at [0, 0] is p - onehot = [-0.5, 0.5]
    logits = Tensor(np.array([[0.0, 0.0]]), requires_grad=True)
    p = softmax_rows(logits)
    loss = -tlog(p[0, 0])
    loss.backward()
    assert logits.grad[0, 0] == pytest.approx(-0.5, abs=1e-12)
    assert logits.grad[0, 1] == pytest.approx(0.5, abs=1e-12)


def test_softmax_rows_values():
    out = softmax_rows(Tensor(np.array([[0.0, 0.0]])))
    np.testing.assert_allclose(out.data, [[0.5, 0.5]], atol=1e-15)
    a = softmax_rows(Tensor(np.array([[1.0, 1.0]])))
    np.testing.assert_allclose(a.data, [[0.5, 0.5]], atol=1e-15)
    b = softmax_rows(Tensor(np.array([[0.0, np.log(3.0)]])))
    np.testing.assert_allclose(b.data, [[0.25, 0.75]], atol=1e-12)


def test_softmax_mask_exact_zero():
    logits = Tensor(np.arange(6.0).reshape(2, 3))
    mask = np.array([False, True, False])
    out = softmax_rows(logits, column_mask=mask)
    assert np.all(out.data[:, 1] == 0.0)
    np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-12)


def test_softmax_all_masked_raises():
    with pytest.raises(DegenerateMaskError):
        softmax_rows(Tensor(np.zeros((1, 2))), column_mask=np.array([True, True]))


def test_broadcast_add_unbroadcasts_grad():
    a = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.ones((4,)), requires_grad=True)
    tsum(a + b).backward()
    assert a.grad.shape == (3, 4)
    assert b.grad.shape == (4,)
    np.testing.assert_allclose(b.grad, 3.0)


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_grad_accumulates_across_uses():
    x = Tensor(np.array([1.5]), requires_grad=True)
    y = x * 2.0 + x * 5.0
    y.backward()
    assert x.grad[0] == pytest.approx(7.0, abs=1e-12)


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad
    assert y._parents == ()


def test_segment_mean_values_and_grad():
    x = Tensor(np.array([[0.0, 2.0], [2.0, 0.0], [5.0, 5.0]]), requires_grad=True)
    seg = np.array([0, 0, 1])
    out = segment_mean(x, seg, 2)
    np.testing.assert_allclose(out.data, [[1.0, 1.0], [5.0, 5.0]], atol=1e-15)
    r = gradcheck(scalarize(lambda t: segment_mean(t, seg, 2)),
                  [Tensor(np.random.default_rng(0).normal(size=(3, 2)),
                          requires_grad=True)])
    assert r.passed


def test_concat_split_gradients():
    rng = np.random.default_rng(1)
    a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    r = gradcheck(scalarize(lambda u, v: concat([u, v])), [a, b])
    assert r.passed


def test_bmm_matches_loop():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(3, 2, 4))
    b = rng.normal(size=(3, 4, 5))
    out = bmm(Tensor(a), Tensor(b))
    np.testing.assert_allclose(out.data, a @ b, atol=1e-14)
    r = gradcheck(scalarize(lambda u, v: bmm(u, v)),
                  [Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)])
    assert r.passed


def test_layer_norm_rows_statistics():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(4, 8)) * 3.0 + 1.0, requires_grad=True)
    gain = Tensor(np.ones(8))
    bias = Tensor(np.zeros(8))
    out = layer_norm_rows(x, gain, bias)
    np.testing.assert_allclose(out.data.mean(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.data.std(axis=1), 1.0, atol=1e-5)


@pytest.mark.parametrize("op", [
    lambda t: relu(t),
    lambda t: texp(t * 0.3),
    lambda t: softplus(t),
    lambda t: tmean(t, axis=0),
    lambda t: logsumexp_rows(t),
    lambda t: t.reshape(2, 6),
    lambda t: t.T,
])
def test_elementwise_gradchecks(op):
    rng = np.random.default_rng(7)
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    assert gradcheck(scalarize(op), [x]).passed


def test_init_uniform_range():
    rng = np.random.default_rng(0)
    w = init_uniform(rng, (64, 16), fan_in=64)
    bound = 1.0 / np.sqrt(64)
    assert w.data.min() >= -bound and w.data.max() <= bound
