import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from morphgrasp import autodiff as ad
from morphgrasp.errors import NonFiniteError, NotScalarLossError, ShapeMismatchError
from morphgrasp.gradcheck import TOLERANCE, check_ops


def _grad(f, x):
    x = ad.Tensor(np.asarray(x, dtype=float), requires_grad=True)
    with ad.Tape() as tape:
        y = f(x)
    return tape.backward(y, {"x": x})["x"]


def test_trivial_forward_values():
    assert ad.tanh(ad.Tensor([[0.0]])).data[0, 0] == 0.0
    assert _grad(lambda t: ad.sum_all(ad.tanh(t)), [[0.0]])[0, 0] == 1.0
    M = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ad.matmul(ad.Tensor(M), ad.Tensor(np.eye(2))).data, M)


def test_layernorm_constant_row_is_zero():
    out = ad.layernorm(ad.Tensor(np.full((2, 4), 3.7))).data
    np.testing.assert_array_equal(out, np.zeros((2, 4)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 40))
def test_layernorm_row_statistics(seed, width):
    x = np.random.default_rng(seed).normal(0, 3, size=(5, width))
    z = ad.layernorm(ad.Tensor(x)).data
    assert np.all(np.abs(z.mean(axis=1)) < 1e-12)
    var = x.var(axis=1)
    np.testing.assert_allclose(z.var(axis=1), var / (var + 1e-5), atol=1e-12)
    assert np.all(np.abs(z.var(axis=1) - 1.0) < 1e-4 / var.min() + 1e-12)


def test_backward_examples():
    np.testing.assert_array_equal(_grad(ad.sum_all, np.ones((3, 1)) * 0.4), np.ones((3, 1)))
    W = ad.Tensor(np.eye(2))
    g = _grad(lambda x: ad.sum_all(ad.square(ad.matmul(W, x))), [[1.0], [0.0]])
    np.testing.assert_array_equal(g, [[2.0], [0.0]])


def test_tanh_chain_against_finite_differences():
    rng = np.random.default_rng(3)
    M = ad.Tensor(rng.normal(size=(4, 4)))
    f = lambda t: ad.sum_all(ad.tanh(ad.matmul(ad.tanh(ad.matmul(t, M)), M)))
    assert ad.grad_check(f, rng.normal(size=(4, 4)), h=1e-6) < 1e-6


def test_linear_function_is_exact():
    rng = np.random.default_rng(4)
    W, C = ad.Tensor(rng.normal(size=(3, 2))), ad.Tensor(rng.normal(size=(5, 2)))
    f = lambda t: ad.sum_all(ad.mul(ad.matmul(t, W), C))
    # no truncation error for a linear f, so a wide step leaves only rounding
    assert ad.grad_check(f, np.random.default_rng(5).normal(size=(5, 3)), h=1e-2) < 1e-10


def test_relu_after_nudge():
    x = np.array([[-1e-9, 2e-9, 0.0, -0.3]])
    x = x + np.where(x >= 0, 1e-3, -1e-3)
    assert ad.grad_check(lambda t: ad.sum_all(ad.mul(ad.relu(t), ad.Tensor([[1.0, 2.0, 3.0, 4.0]]))), x) < 1e-5


@pytest.mark.parametrize("result", check_ops(instances=20, seed=11), ids=lambda r: r.name)
def test_every_op_passes_grad_check(result):
    assert result.instances >= 20
    assert result.worst < TOLERANCE


def test_kink_crossing_coordinates_are_skipped():
    # |x| at 0 has no derivative; the check must not count that coordinate
    f = lambda t: ad.sum_all(ad.add(ad.relu(t), ad.relu(ad.scale(t, -1.0))))
    assert ad.grad_check(f, np.array([[0.0, 0.5]]), h=1e-6) < 1e-9


def test_resolvable_only_restricts_coordinates():
    big = ad.Tensor(np.array([[1e6, 0.0]]))
    f = lambda t: ad.add_scalar(ad.sum_all(ad.mul(t, ad.Tensor([[1.0, 1e-12]]))), 1e6)
    x = np.array([[1.0, 1.0]])
    assert ad.resolvable_floor(1e6, 1e-6) > 1e-12
    assert ad.grad_check(f, x, resolvable_only=True) < 1e-10
    del big


def test_small_gradient_coordinate_with_larger_step():
    # gradients far below the h=1e-6 floor are verified with h=1e-4 instead
    c = 1e-7
    f = lambda t: ad.add_scalar(ad.sum_all(ad.scale(ad.tanh(t), c)), 1.0)
    x = np.array([[0.3, -0.7]])
    assert 2 * c < ad.resolvable_floor(1.0, 1e-6)
    assert ad.grad_check(f, x, h=1e-4) < 1e-5


def test_not_scalar_loss():
    x = ad.Tensor(np.ones((2, 2)), requires_grad=True)
    with ad.Tape() as tape:
        y = ad.scale(x, 2.0)
    with pytest.raises(NotScalarLossError):
        tape.backward(y)


def test_disconnected_parameter_gets_zero_and_diagnostic():
    a = ad.Tensor(np.ones((1, 2)), requires_grad=True)
    b = ad.Tensor(np.ones((3, 1)), requires_grad=True)
    with ad.Tape() as tape:
        y = ad.sum_all(ad.square(a))
    g = tape.backward(y, {"a": a, "b": b})
    np.testing.assert_array_equal(g["b"], np.zeros((3, 1)))
    assert any("DisconnectedParameter" in d and "b" in d for d in tape.diagnostics)


def test_leaf_grads_filled_without_params():
    x = ad.Tensor(np.array([[1.0, -2.0]]), requires_grad=True)
    with ad.Tape() as tape:
        y = ad.sum_all(ad.square(x))
    tape.backward(y)
    np.testing.assert_array_equal(x.grad, [[2.0, -4.0]])


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeMismatchError, match=r"\(2, 3\).*\(4, 5\)"):
        ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((4, 5))))
    with pytest.raises(ShapeMismatchError):
        ad.add(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 2))))


def test_row_bias_broadcast_only():
    out = ad.add(ad.Tensor(np.zeros((3, 2))), ad.Tensor([[1.0, 2.0]])).data
    np.testing.assert_array_equal(out, [[1.0, 2.0]] * 3)
    with pytest.raises(ShapeMismatchError):
        ad.add(ad.Tensor(np.zeros((3, 2))), ad.Tensor(np.zeros((3, 1))))


def test_check_finite():
    with pytest.raises(NonFiniteError):
        ad.check_finite(ad.Tensor([[np.nan]]))
    ad.check_finite(ad.Tensor([[1.0]]))


def test_row_select_accumulates_repeated_rows():
    g = _grad(lambda t: ad.sum_all(ad.row_select(t, [1, 1, 0])), np.zeros((3, 2)))
    np.testing.assert_array_equal(g, [[1, 1], [2, 2], [0, 0]])


def test_determinism():
    rng = np.random.default_rng(9)
    x0, M = rng.normal(size=(4, 4)), ad.Tensor(rng.normal(size=(4, 4)))
    f = lambda t: ad.sum_all(ad.tanh(ad.layernorm(ad.matmul(t, M))))
    g1, g2 = _grad(f, x0), _grad(f, x0)
    assert g1.tobytes() == g2.tobytes()
