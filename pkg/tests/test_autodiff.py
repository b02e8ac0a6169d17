import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from veribnb import autodiff as ad
from oracles import naive_matvec


def test_affine_small_cases():
    W = ad.Tensor([[1.0, 1.0], [1.0, -1.0]])
    assert np.array_equal(ad.affine(W, ad.Tensor([1.0, 2.0]), ad.Tensor([0.0, 0.0])).data, [3.0, -1.0])
    out = ad.affine(ad.Tensor(np.eye(2)), ad.Tensor([0.5, -0.5]), ad.Tensor([1.0, 1.0]))
    assert np.array_equal(out.data, [1.5, 0.5])


def test_affine_matches_naive_loops(rng):
    for _ in range(20):
        W, x, b = rng.normal(size=(3, 3)), rng.normal(size=3), rng.normal(size=3)
        got = ad.affine(ad.Tensor(W), ad.Tensor(x), ad.Tensor(b)).data
        np.testing.assert_allclose(got, naive_matvec(W, x, b), atol=1e-12, rtol=0)


def test_affine_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        ad.affine(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones(2)))


def test_relu_values_and_subgradient():
    assert np.array_equal(ad.relu(ad.Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
    assert np.array_equal(ad.relu(ad.Tensor([-3.0, -0.1])).data, [0.0, 0.0])
    x = ad.Tensor([-1.0, 2.0], requires_grad=True)
    assert np.array_equal(ad.gradient(ad.sum_(ad.relu(x)), [x])[0], [0.0, 1.0])
    z = ad.Tensor([0.0], requires_grad=True)
    assert ad.gradient(ad.sum_(ad.relu(z)), [z])[0][0] == 0.0


def test_gradient_of_linear_form(rng):
    w = rng.normal(size=5)
    x = ad.Tensor(rng.normal(size=5), requires_grad=True)
    (g,) = ad.gradient(ad.sum_(ad.Tensor(w) * x), [x])
    np.testing.assert_array_equal(g, w)


def test_gradient_of_l1_uses_sign_with_zero():
    W = ad.Tensor([[2.0, -3.0, 0.0]], requires_grad=True)
    (g,) = ad.gradient(ad.sum_(ad.abs_(W)), [W])
    np.testing.assert_array_equal(g, [[1.0, -1.0, 0.0]])


def test_unreachable_gets_zero_and_nonscalar_rejected():
    x = ad.Tensor([1.0, 2.0], requires_grad=True)
    y = ad.Tensor([3.0], requires_grad=True)
    gx, gy = ad.gradient(ad.sum_(x), [x, y])
    assert np.array_equal(gy, [0.0])
    with pytest.raises(ad.ShapeError):
        ad.gradient(ad.relu(x), [x])


def test_non_finite_rejected():
    with pytest.raises(ad.NonFiniteError):
        ad.Tensor([1.0, np.nan])
    with pytest.raises(ad.NonFiniteError):
        ad.Tensor([np.inf])


def _two_layer_loss(params, x, y):
    W1, b1, W2, b2 = params
    h = ad.relu(ad.affine(W1, ad.Tensor(x), b1))
    return ad.cross_entropy(ad.affine(W2, h, b2), y)


def test_two_layer_loss_matches_finite_differences(rng):
    x = rng.normal(size=(6, 3))
    y = rng.integers(0, 2, 6)
    theta = [rng.normal(size=(5, 3)), rng.normal(size=5), rng.normal(size=(2, 5)), rng.normal(size=2)]
    assert ad.finite_difference_check(lambda p: _two_layer_loss(p, x, y), theta) < 1e-4


def test_finite_difference_check_trivial_functions():
    assert ad.finite_difference_check(lambda p: ad.sum_(p[0] * p[0]), [np.array([3.0])]) < 1e-8
    w = ad.Tensor([2.0, -1.0, 0.5])
    assert ad.finite_difference_check(lambda p: ad.sum_(w * p[0]), [np.array([0.3, 1.0, -2.0])]) < 1e-10


def test_tape_replay_is_bit_exact(rng):
    with ad.Tape() as tape:
        W = ad.Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        x = ad.Tensor(rng.normal(size=(7, 3)))
        h = ad.relu(ad.affine(W, x, ad.Tensor(rng.normal(size=4))))
        out = ad.reduce_max(ad.clamp(h, 0.1, 0.9)) + ad.reduce_min(h * h)
    assert len(tape) > 0
    assert tape.replay_matches()
    assert out.data.ndim == 0


def test_cross_entropy_value():
    logits = ad.Tensor([[0.0, 0.0], [2.0, 0.0]])
    got = ad.cross_entropy(logits, np.array([0, 1])).item()
    expect = 0.5 * (np.log(2.0) + (np.log(np.exp(2.0) + 1.0)))
    assert got == pytest.approx(expect, abs=1e-14)


vec = arrays(np.float64, st.integers(1, 6), elements=st.floats(-5, 5))


@given(vec)
def test_relu_gradient_is_indicator(v):
    x = ad.Tensor(v, requires_grad=True)
    (g,) = ad.gradient(ad.sum_(ad.relu(x)), [x])
    np.testing.assert_array_equal(g, (v > 0).astype(float))


@given(vec, vec)
def test_sum_of_products_gradient(a, b):
    n = min(a.size, b.size)
    x = ad.Tensor(a[:n], requires_grad=True)
    (g,) = ad.gradient(ad.sum_(x * ad.Tensor(b[:n])), [x])
    np.testing.assert_array_equal(g, b[:n])


@given(vec)
def test_gradient_independent_of_unused_parameter(v):
    x = ad.Tensor(v, requires_grad=True)
    unused = ad.Tensor(np.ones(3), requires_grad=True)
    _, g = ad.gradient(ad.sum_(ad.relu(x) * x), [x, unused])
    assert np.array_equal(g, np.zeros(3))
