import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hierlatent import autodiff as ad


def fd_check(f, *arrays, h=1e-6, tol=1e-6, seed=0):
    """Compare grad of sum(w * f(...)) against central differences."""
    rng = np.random.default_rng(seed)
    xs = [ad.Var(a) for a in arrays]
    out = f(*xs)
    w = rng.normal(size=out.shape)
    analytic = ad.grad(out, xs, seed=w)

    def scalar(vals):
        return float((w * f(*[ad.Var(v) for v in vals]).value).sum())

    for i, a in enumerate(arrays):
        num = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            plus = [v.copy() for v in arrays]
            minus = [v.copy() for v in arrays]
            plus[i][idx] += h
            minus[i][idx] -= h
            num[idx] = (scalar(plus) - scalar(minus)) / (2 * h)
        np.testing.assert_allclose(analytic[i], num, rtol=tol, atol=tol)


R = np.random.default_rng(42)


def arr(*shape, positive=False):
    a = R.normal(size=shape)
    return np.abs(a) + 0.5 if positive else a


@pytest.mark.parametrize("name,f,args", [
    ("add_broadcast", lambda a, b: a + b, (arr(3, 4), arr(1, 4))),
    ("sub_rhs_scalar", lambda a: 2.0 - a, (arr(3),)),
    ("mul_broadcast", lambda a, b: a * b, (arr(2, 3, 4), arr(3, 1))),
    ("div", lambda a, b: a / b, (arr(3, 2), arr(3, 2, positive=True))),
    ("rdiv", lambda a: 1.5 / a, (arr(4, positive=True),)),
    ("matmul_batched", lambda a, b: a @ b, (arr(2, 3, 4), arr(2, 4, 5))),
    ("matmul_shared_rhs", lambda a, b: a @ b, (arr(2, 3, 4), arr(4, 2))),
    ("einsum", lambda a, b: ad.einsum("rbmk,rmkh->rbmh", a, b), (arr(2, 3, 2, 4), arr(2, 2, 4, 3))),
    ("einsum_reduce", lambda a, b: ad.einsum("rbmh,rmh->rbm", a, b), (arr(2, 3, 2, 4), arr(2, 2, 4))),
    ("exp", ad.exp, (arr(5),)),
    ("log", ad.log, (arr(5, positive=True),)),
    ("square", ad.square, (arr(5),)),
    ("tanh", ad.tanh, (arr(5),)),
    ("sigmoid", ad.sigmoid, (arr(6) * 5,)),
    ("relu", ad.relu, (arr(7),)),
    ("leaky_relu", lambda a: ad.leaky_relu(a, 0.2), (arr(7),)),
    ("sum_axis", lambda a: ad.sum(a, axis=1), (arr(3, 4, 2),)),
    ("sum_keep", lambda a: ad.sum(a, axis=0, keepdims=True), (arr(3, 4),)),
    ("mean_all", lambda a: ad.mean(a), (arr(3, 4),)),
    ("mean_tuple", lambda a: ad.mean(a, axis=(1, 2)), (arr(2, 3, 4),)),
    ("logsumexp", lambda a: ad.logsumexp(a, axis=1), (arr(3, 5) * 3,)),
    ("reshape", lambda a: ad.reshape(a, (6, 2)), (arr(3, 4),)),
    ("swapaxes", lambda a: ad.swapaxes(a, 0, 2), (arr(2, 3, 4),)),
    ("expand_dims", lambda a: ad.expand_dims(a, 1) * np.ones((3, 2, 1)), (arr(3, 1),)),
    ("index_slice", lambda a: a[:, 1:3], (arr(3, 4),)),
    ("index_repeat", lambda a: a[np.array([0, 0, 2])], (arr(3, 2),)),
    ("take_along", lambda a: ad.take_along(a, np.array([[[1, 0], [1, 1], [0, 0]]]), axis=1),
     (arr(1, 3, 2),)),
    ("concat", lambda a, b: ad.concat([a, b], axis=1), (arr(2, 3), arr(2, 1))),
    ("prod_except", lambda a: ad.prod_except(a, axis=1), (arr(2, 4, 3),)),
    ("neg", lambda a: -a, (arr(3),)),
])
def test_op_gradients(name, f, args):
    fd_check(f, *[a.copy() for a in args])


def test_prod_except_with_zeros():
    a = np.array([[0.0, 2.0, 3.0], [0.0, 0.0, 5.0]]).T          # axis 0 has zeros
    out = ad.prod_except(ad.Var(a), axis=0).value
    np.testing.assert_array_equal(out[:, 0], [6.0, 0.0, 0.0])
    np.testing.assert_array_equal(out[:, 1], [0.0, 0.0, 0.0])
    fd_check(lambda v: ad.prod_except(v, axis=0), a.copy())


def test_sigmoid_extremes_finite():
    out = ad.sigmoid(ad.Var(np.array([-800.0, 0.0, 800.0])))
    assert np.all(np.isfinite(out.value))
    np.testing.assert_allclose(out.value, [0.0, 0.5, 1.0])


def test_shared_subexpression_accumulates():
    x = ad.Var(np.array(3.0))
    y = x * x + x
    (g,) = ad.grad(y, [x])
    assert g == pytest.approx(7.0)


def test_unused_input_gets_zero():
    x, y = ad.Var(np.ones(3)), ad.Var(np.ones(2))
    gx, gy = ad.grad(ad.sum(x), [x, y])
    np.testing.assert_array_equal(gy, np.zeros(2))
    np.testing.assert_array_equal(gx, np.ones(3))


def test_non_scalar_needs_seed():
    with pytest.raises(ValueError):
        ad.grad(ad.Var(np.ones(3)) * 2.0, [])


def test_numpy_on_left():
    x = ad.Var(np.ones((2, 2)))
    assert isinstance(np.eye(2) @ x, ad.Var)
    assert isinstance(np.ones(2) * x, ad.Var)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 10 ** 6))
def test_composite_mlp_gradient(m, k, seed):
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(k, 3))
    x = rng.normal(size=(m, k))
    f = lambda x, W: ad.logsumexp(ad.tanh(x @ W) * ad.sigmoid(x @ W), axis=1)
    fd_check(f, x, W, seed=seed, tol=1e-5)
