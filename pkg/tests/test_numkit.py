import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from gracekit import numkit as nk
from gracekit.errors import ContractError, NumericalError, ShapeError


def test_matmul_examples():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(nk.matmul(np.eye(2), a), a)
    np.testing.assert_array_equal(nk.matmul(a, np.array([[0.0], [1.0]])), [[2.0], [4.0]])
    np.testing.assert_array_equal(nk.matmul(np.ones((1, 0)), np.ones((0, 1))), np.zeros((1, 1)))


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        nk.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_log_softmax_examples():
    np.testing.assert_allclose(nk.log_softmax(np.zeros(4)), np.log(np.full(4, 0.25)), atol=1e-15)
    np.testing.assert_allclose(nk.log_softmax(np.array([0.0, np.log(3.0)])),
                               [np.log(0.25), np.log(0.75)], atol=1e-15)
    out = nk.log_softmax(np.array([1000.0, 0.0]))
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [0.0, -1000.0], atol=1e-12)
    with pytest.raises(ShapeError):
        nk.log_softmax(np.array([]))


def test_log_softmax_mask_gets_no_mass_or_gradient(rng):
    x = rng.normal(size=5)
    mask = np.array([True, False, True, True, False])
    out = nk.log_softmax(x, mask=mask)
    assert out[~mask].tolist() == [0.0, 0.0]
    np.testing.assert_allclose(np.exp(out[mask]).sum(), 1.0)
    g = nk.grad(lambda v: nk.sum(nk.log_softmax(v, mask=mask) * np.arange(5.0)), x)
    assert g[~mask].tolist() == [0.0, 0.0]


@given(arrays(np.float64, st.integers(2, 12), elements=st.floats(-50, 50)),
       st.floats(0.25, 8.0))
def test_log_softmax_normalizes(x, temperature):
    p = np.exp(nk.log_softmax(x, temperature))
    np.testing.assert_allclose(p.sum(), 1.0, rtol=1e-12)


def test_backward_examples():
    tape = nk.Tape()
    x = tape.leaf(np.array(3.0))
    assert nk.backward(x * x)[x] == pytest.approx(6.0)
    g = nk.grad(lambda v: nk.sum(nk.softmax(v)), np.array([0.3, -1.0, 2.0]))
    np.testing.assert_allclose(g, 0.0, atol=1e-14)


def test_backward_rejects_non_scalar():
    tape = nk.Tape()
    with pytest.raises(ContractError):
        nk.backward(tape.leaf(np.ones(3)) * 2.0)


def test_non_finite_value_is_reported():
    tape = nk.Tape()
    x = tape.leaf(np.array([0.0, 1.0]))
    with np.errstate(divide="ignore"), pytest.raises(NumericalError):
        nk.log(x)


def test_finite_diff_check_examples(rng):
    w = rng.normal(size=7)
    assert nk.finite_diff_check(lambda v: nk.sum(v * v), w) < 1e-8
    wrong = 3.0 * w  # true gradient is 2w
    assert nk.finite_diff_check(lambda v: nk.sum(v * v), w, analytic=wrong) > 1e-2


def _composite(p):
    a = nk.reshape(p[:12], (3, 4))
    b = nk.reshape(p[12:20], (4, 2))
    h = nk.tanh(a @ b)
    z = nk.concat([h, nk.exp(h * 0.5)], axis=-1)
    return nk.mean(nk.square(z)) + nk.sum(nk.log_softmax(z, 1.7)[:, 1]) - nk.sum(nk.sqrt(nk.square(h) + 1.0)) / 3.0


def test_composite_gradient_matches_finite_differences(rng):
    assert nk.finite_diff_check(_composite, rng.normal(size=20)) < 1e-6


def test_batched_and_vector_matmul_gradients(rng):
    def f(p):
        a = nk.reshape(p[:24], (2, 3, 4))
        v = p[24:28]
        m = nk.reshape(p[28:36], (4, 2))
        return nk.sum(nk.square(a @ v)) + nk.sum(nk.tanh(a @ m))

    assert nk.finite_diff_check(f, rng.normal(size=36)) < 1e-6


def test_broadcast_gradients_are_reduced(rng):
    x = rng.normal(size=(3, 4))
    b = rng.normal(size=4)
    tape = nk.Tape()
    xv, bv = tape.leaf(x), tape.leaf(b)
    grads = nk.backward(nk.sum((xv + bv) * (xv - bv)))
    np.testing.assert_allclose(grads[bv], -6.0 * b)
    np.testing.assert_allclose(grads[xv], 2.0 * x)


def test_plain_arrays_pass_through_untracked(rng):
    x = rng.normal(size=(2, 3))
    out = nk.tanh(x) @ nk.transpose(x)
    assert isinstance(out, np.ndarray)
    np.testing.assert_allclose(out, np.tanh(x) @ x.T)


def test_getitem_gradient_accumulates_repeats():
    g = nk.grad(lambda v: nk.sum(nk.getitem(v, np.array([0, 0, 2]))), np.zeros(3))
    np.testing.assert_array_equal(g, [2.0, 0.0, 1.0])


def test_as_matrix_validates():
    with pytest.raises(ShapeError):
        nk.as_matrix(np.ones(3))
    with pytest.raises(NumericalError):
        nk.as_matrix(np.array([[np.nan]]))
