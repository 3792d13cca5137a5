import numpy as np
import pytest
from scipy.signal import correlate

from cryoforge import diffcore as dc
from cryoforge.diffcore import ComplexPair, Tensor

TOL = 1e-4


def check_grad(fn, *leaves, eps=1e-6):
    """Compare taped gradients of scalar fn() with central differences for every leaf."""
    for leaf in leaves:
        leaf.grad = None
    out = fn()
    out.backward()
    for leaf in leaves:
        num = dc.numerical_grad(fn, leaf, eps=eps)
        ana = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        err = dc.max_rel_error(ana, num)
        assert err < TOL, f"{leaf.shape}: rel err {err:.2e}"


def leaf(rng, *shape, positive=False):
    x = rng.normal(size=shape)
    if positive:
        x = np.abs(x) + 0.5
    return Tensor(x, requires_grad=True)


@pytest.mark.parametrize("op", [dc.add, dc.sub, dc.mul, dc.div])
def test_binary_ops_with_broadcasting(op, rng):
    a = leaf(rng, 3, 4)
    b = leaf(rng, 4, positive=True)
    check_grad(lambda: dc.tsum(dc.sin(op(a, b))), a, b)


@pytest.mark.parametrize("op", [dc.sin, dc.cos, dc.exp, dc.tanh, dc.neg])
def test_unary_ops(op, rng):
    x = leaf(rng, 5, 3)
    check_grad(lambda: dc.tsum(dc.mul(op(x), x)), x)


def test_relu_away_from_kink(rng):
    x = Tensor(rng.choice([-1, 1], size=(4, 4)) * rng.uniform(0.1, 1, size=(4, 4)), True)
    check_grad(lambda: dc.sumsq(dc.relu(x)), x)


def test_sqrt_and_power(rng):
    x = leaf(rng, 6, positive=True)
    check_grad(lambda: dc.tsum(dc.sqrt(x)) + dc.tsum(dc.power(x, -0.5)) + dc.tsum(x ** 3), x)


def test_clip_max(rng):
    x = Tensor(np.array([-3.0, 0.5, 1.7, 4.0]), requires_grad=True)
    y = dc.clip_max(x, 2.0)
    np.testing.assert_array_equal(y.data, [-3.0, 0.5, 1.7, 2.0])
    check_grad(lambda: dc.tsum(dc.mul(dc.clip_max(x, 2.0), x)), x)


def test_where_routes_gradients(rng):
    a, b = leaf(rng, 5), leaf(rng, 5)
    cond = np.array([True, False, True, False, False])
    check_grad(lambda: dc.sumsq(dc.where(cond, a, b)), a, b)
    a.grad = b.grad = None
    dc.tsum(dc.where(cond, a, b)).backward()
    np.testing.assert_array_equal(a.grad, cond.astype(float))
    np.testing.assert_array_equal(b.grad, (~cond).astype(float))


@pytest.mark.parametrize("axis,keepdims", [(None, False), (0, False), (1, True), ((0, 2), False)])
def test_reductions(axis, keepdims, rng):
    x = leaf(rng, 3, 4, 2)
    w = rng.normal(size=dc.tsum(x, axis=axis, keepdims=keepdims).shape)
    check_grad(lambda: dc.tsum(dc.mul(dc.tsum(x, axis, keepdims), w)), x)
    check_grad(lambda: dc.tsum(dc.mul(dc.mean(x, axis, keepdims), w)), x)
    check_grad(lambda: dc.tsum(dc.mul(dc.sumsq(x, axis, keepdims), w)), x)


def test_shape_ops(rng):
    x = leaf(rng, 2, 3, 4)
    w = rng.normal(size=(4, 3, 2))
    check_grad(lambda: dc.tsum(dc.mul(dc.transpose(x), w)), x)
    check_grad(lambda: dc.tsum(dc.mul(dc.reshape(x, (4, 3, 2)), w)), x)
    check_grad(lambda: dc.sumsq(dc.swap_last(x)), x)


def test_concat_stack_getitem_take(rng):
    a, b = leaf(rng, 2, 3), leaf(rng, 4, 3)
    check_grad(lambda: dc.sumsq(dc.sin(dc.concat([a, b], axis=0))), a, b)
    c = leaf(rng, 2, 3)
    check_grad(lambda: dc.sumsq(dc.sin(dc.stack([a, c], axis=1))), a, c)
    check_grad(lambda: dc.sumsq(dc.getitem(b, (slice(1, 3), 2))), b)
    idx = np.array([0, 2, 2, 1])
    check_grad(lambda: dc.sumsq(dc.take(b, idx, axis=0)), b)


def test_matmul_batched(rng):
    a, b = leaf(rng, 2, 3, 4), leaf(rng, 4, 5)
    check_grad(lambda: dc.tsum(dc.sin(dc.matmul(a, b))), a, b)
    np.testing.assert_allclose(dc.matmul(a, b).data, a.data @ b.data)


def test_linear(rng):
    x, W, bias = leaf(rng, 5, 3), leaf(rng, 3, 4), leaf(rng, 4)
    np.testing.assert_allclose(dc.linear(x, W, bias).data, x.data @ W.data + bias.data)
    check_grad(lambda: dc.tsum(dc.sin(dc.linear(x, W, bias))), x, W, bias)


def test_conv2d_matches_scipy_correlation(rng):
    x = rng.normal(size=(2, 3, 6, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    got = dc.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    ref = np.zeros((2, 4, 6, 6))
    for n in range(2):
        for o in range(4):
            ref[n, o] = b[o] + sum(correlate(x[n, c], w[o, c], mode="same") for c in range(3))
    np.testing.assert_allclose(got, ref, atol=1e-12)


def test_conv2d_grad(rng):
    x, w, b = leaf(rng, 2, 2, 5, 5), leaf(rng, 3, 2, 3, 3), leaf(rng, 3)
    check_grad(lambda: dc.tsum(dc.sin(dc.conv2d(x, w, b))), x, w, b)


def test_maxpool(rng):
    x = leaf(rng, 2, 3, 4, 6)
    ref = x.data.reshape(2, 3, 2, 2, 3, 2).max(axis=(3, 5))
    np.testing.assert_array_equal(dc.maxpool2x2(x).data, ref)
    check_grad(lambda: dc.tsum(dc.sin(dc.maxpool2x2(x))), x)


def test_complex_pair_arithmetic(rng):
    z = rng.normal(size=4) + 1j * rng.normal(size=4)
    w = rng.normal(size=4) + 1j * rng.normal(size=4)
    a, b = ComplexPair.from_numpy(z), ComplexPair.from_numpy(w)
    np.testing.assert_allclose((a * b).numpy(), z * w)
    np.testing.assert_allclose((a + b).numpy(), z + w)
    np.testing.assert_allclose((a - b).numpy(), z - w)
    np.testing.assert_allclose(a.conj().numpy(), np.conj(z))
    np.testing.assert_allclose(a.abs2().data, np.abs(z) ** 2)


def test_complex_product_grad(rng):
    ar, ai, br, bi = (leaf(rng, 3) for _ in range(4))
    check_grad(lambda: (ComplexPair(ar, ai) * ComplexPair(br, bi)).sumsq(), ar, ai, br, bi)


def test_gradient_accumulates_over_reuse(rng):
    x = leaf(rng, 3)
    y = dc.tsum(dc.mul(x, x)) + dc.tsum(x)
    y.backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_no_grad_records_nothing(rng):
    x = leaf(rng, 3)
    with dc.no_grad():
        y = dc.tsum(dc.sin(x))
    assert y.op == "leaf" or not y._parents
    assert dc.grad_enabled()


def test_backward_requires_scalar(rng):
    with pytest.raises(ValueError):
        dc.sin(leaf(rng, 3)).backward()


def test_shape_errors_name_the_op(rng):
    with pytest.raises(dc.ShapeError, match="matmul"):
        dc.matmul(leaf(rng, 2, 3), leaf(rng, 4, 5))
    with pytest.raises(dc.ShapeError, match="add"):
        dc.add(leaf(rng, 2, 3), leaf(rng, 4))


def test_precision_switch():
    with dc.precision(np.float32):
        assert Tensor([1.0]).data.dtype == np.float32
    assert Tensor([1.0]).data.dtype == np.float64
    with pytest.raises(ValueError):
        dc.set_dtype(np.int32)


def test_adam_matches_reference_trajectory():
    # [DERIVED] three steps of a reference Adam implementation (lr 0.1, default betas/eps)
    p = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
    opt = dc.Adam([p], lr=0.1)
    for g in ([0.5, -1.0, 0.0], [0.1, 0.3, -2.0], [-0.4, 0.2, 1e-3]):
        opt.zero_grad()
        p.grad = np.array(g)
        opt.step()
    np.testing.assert_allclose(p.data, [0.8103259663582117, -1.8367640907137168,
                                        0.6319037096128037], rtol=1e-12)


def test_adam_first_step_is_lr_times_sign():
    p = Tensor(np.array([0.0, 0.0]), requires_grad=True)
    opt = dc.Adam([p], lr=0.01)
    p.grad = np.array([3.0, -0.2])
    opt.step()
    np.testing.assert_allclose(p.data, [-0.01, 0.01], rtol=1e-6)


def test_adam_minimizes_quadratic():
    p = Tensor(np.array([3.0, -4.0]), requires_grad=True)
    opt = dc.Adam([p], lr=0.1)
    for _ in range(500):
        opt.zero_grad()
        dc.sumsq(dc.sub(p, np.array([1.0, 2.0]))).backward()
        opt.step()
    np.testing.assert_allclose(p.data, [1.0, 2.0], atol=1e-3)


def test_max_rel_error_scale():
    assert dc.max_rel_error(np.array([1.0, 0.0]), np.array([1.0, 1e-9])) < 1e-8
    assert dc.max_rel_error(np.array([2.0]), np.array([1.0])) == pytest.approx(0.5)
