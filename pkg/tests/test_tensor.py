import numpy as np
import pytest

from toposearch import tensor as T

RNG = np.random.default_rng(0)


def x4(*shape):
    return RNG.normal(size=shape)


UNARY = {
    "relu": (lambda x, w=x4(2, 3): T.sum_(T.mul(T.relu(x), w)), lambda: x4(2, 3) + 0.05),
    "log": (lambda x, w=x4(2, 3): T.sum_(T.mul(T.log(x), w)), lambda: RNG.uniform(0.5, 2, (2, 3))),
    "exp": (lambda x, w=x4(2, 3): T.sum_(T.mul(T.exp(x), w)), lambda: x4(2, 3)),
    "sigmoid": (lambda x, w=x4(2, 3): T.sum_(T.mul(T.sigmoid(x), w)), lambda: x4(2, 3)),
    "softmax": (lambda x, w=x4(2, 5): T.sum_(T.mul(T.softmax(x, axis=-1), w)), lambda: x4(2, 5)),
    "log_softmax": (lambda x, w=x4(2, 5): T.sum_(T.mul(T.log_softmax(x, axis=1), w)), lambda: x4(2, 5)),
    "scale": (lambda x, w=x4(4): T.sum_(T.mul(T.scale(x, -2.5), w)), lambda: x4(4)),
    "abs": (lambda x, w=x4(4): T.sum_(T.mul(T.abs_(x), w)), lambda: np.array([0.5, -1.0, 2.0, -0.3])),
    "clamp": (lambda x, w=x4(5): T.sum_(T.mul(T.clamp(x, -0.5, 0.5), w)), lambda: np.array([-1, -0.2, 0.1, 0.3, 1.0])),
    "mean": (lambda x: T.mean(T.mul(x, x)), lambda: x4(3, 2)),
    "reshape": (lambda x, w=x4(3, 2): T.sum_(T.mul(T.reshape(x, (3, 2)), w)), lambda: x4(2, 3)),
    "getitem": (lambda x, w=x4(3, 4): T.sum_(T.mul(T.getitem(x, (np.array([0, 2, 0]),)), w)), lambda: x4(3, 4)),
    "sum_axis": (lambda x, w=x4(3): T.sum_(T.mul(T.sum_(x, axis=(0, 2)), w)), lambda: x4(2, 3, 4)),
    "upsample2x": (lambda x, w=x4(1, 2, 4, 6): T.sum_(T.mul(T.upsample2x(x), w)), lambda: x4(1, 2, 2, 3)),
    "downsample2x": (lambda x, w=x4(1, 2, 2, 3): T.sum_(T.mul(T.downsample2x(x), w)), lambda: x4(1, 2, 4, 6)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_adjoints(name):
    f, make = UNARY[name]
    rep = T.grad_check(f, [make()], h=1e-5, tol=1e-5)
    assert rep.passed, (name, rep)


def test_binary_adjoints_with_broadcast():
    w = x4(2, 3)
    for op in (T.add, T.sub, T.mul):
        rep = T.grad_check(lambda a, b: T.sum_(T.mul(op(a, b), w)), [x4(2, 3), x4(1, 3)], tol=1e-5)
        assert rep.passed, (op.__name__, rep)
    rep = T.grad_check(lambda a, b, w=x4(2, 4): T.sum_(T.mul(T.matmul(a, b), w)), [x4(2, 3), x4(3, 4)], tol=1e-5)
    assert rep.passed
    ws = x4(3)
    rep = T.grad_check(lambda a, b, c, v, w=x4(2, 2): T.sum_(T.mul(T.weighted_sum([a, b, c], v), w)),
                       [x4(2, 2), x4(2, 2), x4(2, 2), ws], tol=1e-5)
    assert rep.passed
    rep = T.grad_check(lambda a, b, w=x4(3): T.sum_(T.mul(T.add_n([a, b, a]), w)), [x4(3), x4(3)], tol=1e-5)
    assert rep.passed


@pytest.mark.parametrize("kh,kw,dil", [(3, 3, 1), (3, 1, 1), (1, 3, 1), (1, 1, 1), (3, 3, 2)])
def test_conv2d_adjoint(kh, kw, dil):
    x, w, b = x4(2, 3, 6, 5), x4(4, 3, kh, kw), x4(4)
    probe = x4(2, 4, 6, 5)
    rep = T.grad_check(lambda x, w, b: T.sum_(T.mul(T.conv2d(x, w, b, dilation=dil), probe)), [x, w, b], tol=1e-5)
    assert rep.passed, rep


def test_conv2d_against_direct_loop():
    x, w = x4(1, 2, 5, 5), x4(3, 2, 3, 3)
    for dil in (1, 2):
        out = T.conv2d(x, w, dilation=dil).data
        xp = np.pad(x, ((0, 0), (0, 0), (dil, dil), (dil, dil)))
        ref = np.zeros_like(out)
        for o in range(3):
            for i in range(5):
                for j in range(5):
                    patch = xp[0, :, i:i + 2 * dil + 1:dil, j:j + 2 * dil + 1:dil]
                    ref[0, o, i, j] = np.sum(patch * w[o])
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_identity_kernel():
    x = x4(2, 3, 5, 4)
    w = np.zeros((3, 3, 3, 3))
    w[np.arange(3), np.arange(3), 1, 1] = 1.0
    np.testing.assert_allclose(T.conv2d(x, w).data, x, rtol=0, atol=1e-14)


def test_instance_norm_statistics_and_adjoint():
    x = x4(2, 3, 4, 4) * 3 + 1
    y = T.instance_norm(x, np.ones(3), np.zeros(3)).data
    np.testing.assert_allclose(y.mean(axis=(2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=(2, 3)), 1, atol=1e-4)
    probe = x4(2, 3, 4, 4)
    rep = T.grad_check(lambda x, g, b: T.sum_(T.mul(T.instance_norm(x, g, b), probe)),
                       [x4(2, 3, 4, 4), x4(3), x4(3)], tol=1e-5)
    assert rep.passed, rep


def test_linear_function_machine_precision():
    c = x4(3, 4)
    rep = T.grad_check(lambda x: T.sum_(T.mul(x, c)), [x4(3, 4)])
    assert rep.max_rel_err < 1e-8


def test_composite_conv_norm_relu():
    def f(x, w, g, b):
        return T.sum_(T.relu(T.instance_norm(T.conv2d(x, w), g, b)))

    rep = T.grad_check(f, [x4(1, 2, 5, 5), x4(3, 2, 3, 3), 1 + 0.1 * x4(3), x4(3)], tol=1e-4)
    assert rep.passed, rep


def test_wrong_adjoint_is_detected():
    x = x4(3)
    rep = T.grad_check(lambda x: T.sum_(T.mul(x, x)), [x], analytic=[3.0 * x])
    assert not rep.passed and rep.max_rel_err > 1e-5


def test_backward_linearity_and_determinism():
    x0 = x4(2, 3)

    def grads(which):
        with T.Tape() as tape:
            x = T.Tensor(x0, requires_grad=True)
            a = T.sum_(T.exp(x))
            b = T.sum_(T.mul(x, x))
            out = {"a": a, "b": b, "ab": T.add(a, b)}[which]
        return tape.backward(out)[x]

    np.testing.assert_allclose(grads("ab"), grads("a") + grads("b"), rtol=1e-14)
    assert np.array_equal(grads("ab"), grads("ab"))


def test_shape_errors_and_untracked_leaves():
    with pytest.raises(T.ShapeError):
        T.add(np.zeros((2, 3)), np.zeros((3, 2)))
    with pytest.raises(T.ShapeError):
        T.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((3, 5, 3, 3)))
    with T.Tape() as tape:
        x = T.Tensor(np.ones(3), requires_grad=True)
        c = T.Tensor(np.ones(3))
        out = T.sum_(T.mul(x, c))
    g = tape.backward(out)
    assert np.array_equal(g[c], np.zeros(3))
    assert np.array_equal(g[x], np.ones(3))
