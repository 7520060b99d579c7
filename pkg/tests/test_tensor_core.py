import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stedrmgc import tensor_core as tc
from stedrmgc.errors import ConfigError, ContractError, DimensionError
from stedrmgc.tensor_core import Tensor, gradient_check


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


# ---------------------------------------------------------------- matmul


def test_matmul_identity(rng):
    B = rng.normal(size=(3, 3))
    assert np.array_equal(tc.matmul(Tensor(np.eye(3)), Tensor(B)).data, B)


def test_matmul_hand_sum():
    out = tc.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    assert out.data.tolist() == [[3.0], [7.0]]


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
    np.testing.assert_allclose(tc.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), rtol=0, atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        tc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# ---------------------------------------------------------------- batch_dot


def test_batch_dot_identity(rng):
    H = rng.normal(size=(3, 4, 2))
    eye = np.broadcast_to(np.eye(4), (3, 4, 4))
    assert np.array_equal(tc.batch_dot(Tensor(eye), Tensor(H)).data, H)


def test_batch_dot_per_slice(rng):
    a, b = rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 3, 3))
    out = tc.batch_dot(Tensor(a), Tensor(b)).data
    for k in range(2):
        np.testing.assert_allclose(out[k], naive_matmul(a[k], b[k]), atol=1e-12)


def test_batch_dot_broadcast_right(rng):
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
    out = tc.batch_dot(Tensor(a), Tensor(b)).data
    dup = tc.batch_dot(Tensor(a), Tensor(np.stack([b, b]))).data
    assert out.shape == (2, 3, 5)
    np.testing.assert_allclose(out, dup, atol=1e-12)


def test_batch_dot_broadcast_left(rng):
    a, b = rng.normal(size=(6, 3)), rng.normal(size=(4, 3, 2))
    out = tc.batch_dot(Tensor(a), Tensor(b)).data
    np.testing.assert_allclose(out, np.stack([a @ b[k] for k in range(4)]), atol=1e-12)


def test_batch_dot_batch_one_equals_matmul(rng):
    a, b = rng.normal(size=(1, 3, 4)), rng.normal(size=(1, 4, 2))
    assert np.array_equal(tc.batch_dot(Tensor(a), Tensor(b)).data[0], tc.matmul(Tensor(a[0]), Tensor(b[0])).data)


@pytest.mark.parametrize("sa,sb", [((2, 3, 4), (3, 4, 5)), ((2, 3, 4), (2, 5, 5)), ((2, 3, 4), (5, 5))])
def test_batch_dot_mismatch(sa, sb):
    with pytest.raises(DimensionError):
        tc.batch_dot(Tensor(np.ones(sa)), Tensor(np.ones(sb)))


@pytest.mark.parametrize("sa,sb", [((2, 3, 4), (2, 4, 2)), ((2, 3, 4), (4, 2)), ((3, 4), (2, 4, 2))])
def test_batch_dot_gradients(rng, sa, sb):
    a, b = rng.normal(size=sa), rng.normal(size=sb)
    proj = Tensor(rng.normal(size=tc.batch_dot(Tensor(a), Tensor(b)).shape))
    assert gradient_check(lambda t: tc.sum_all(tc.mul(tc.batch_dot(t, Tensor(b)), proj)), a) < 1e-6
    assert gradient_check(lambda t: tc.sum_all(tc.mul(tc.batch_dot(Tensor(a), t), proj)), b) < 1e-6


# ---------------------------------------------------------------- layout


def test_reshape_round_trip_is_bitwise(rng):
    B, N, K, F = 2, 3, 4, 5
    x = rng.normal(size=(B, N * K, F))
    y = tc.reshape(tc.reshape(Tensor(x), (B, N, F * K)), (B, N * K, F))
    assert np.array_equal(y.data, x)


def test_transpose_maps_elements(rng):
    x = rng.normal(size=(2, 3, 4))
    y = tc.transpose(Tensor(x), (0, 2, 1)).data
    for b, n, t in np.ndindex(2, 3, 4):
        assert y[b, t, n] == x[b, n, t]


def test_reshape_gradient_is_ones(rng):
    x = Tensor(rng.normal(size=(2, 6)), requires_grad=True)
    tc.sum_all(tc.reshape(x, (3, 4))).backward()
    assert np.array_equal(x.grad, np.ones((2, 6)))


def test_reshape_count_mismatch():
    with pytest.raises(DimensionError):
        tc.reshape(Tensor(np.ones(6)), (4, 2))


def test_transpose_rejects_non_permutation():
    with pytest.raises(DimensionError):
        tc.transpose(Tensor(np.ones((2, 3))), (0, 0))


def test_concat_and_narrow_gradients(rng):
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 4))
    proj = Tensor(rng.normal(size=(2, 7)))
    assert gradient_check(lambda t: tc.sum_all(tc.mul(tc.concat([t, Tensor(b)]), proj)), a) < 1e-6
    assert gradient_check(lambda t: tc.sum_squares(tc.narrow(t, 1, 3)), b) < 1e-6
    assert gradient_check(lambda t: tc.sum_squares(tc.take(t, 1, axis=1)), b) < 1e-6


@settings(max_examples=30, deadline=None)
@given(
    arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4)),
           elements=st.floats(-1e3, 1e3)),
    st.permutations([0, 1, 2]),
)
def test_transpose_round_trip_property(x, perm):
    inv = tuple(np.argsort(perm))
    assert np.array_equal(tc.transpose(tc.transpose(Tensor(x), perm), inv).data, x)


# ---------------------------------------------------------------- activations


def test_relu_values_and_subgradient():
    x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
    y = tc.activation("relu", x)
    assert y.data.tolist() == [0.0, 0.0, 2.0]
    tc.sum_all(y).backward()
    assert x.grad.tolist() == [0.0, 0.0, 1.0]


def test_linear_is_identity(rng):
    x = rng.normal(size=(3, 2))
    assert np.array_equal(tc.activation("linear", Tensor(x)).data, x)


def test_tanh_gradient_at_zero():
    x = Tensor([0.0], requires_grad=True)
    tc.sum_all(tc.activation("tanh", x)).backward()
    assert x.grad[0] == 1.0
    h = 1e-5
    fd = (np.tanh(h) - np.tanh(-h)) / (2 * h)
    assert abs(x.grad[0] - fd) < 1e-8


def test_sigmoid_is_stable_for_large_inputs():
    y = tc.activation("sigmoid", Tensor([-1000.0, 0.0, 1000.0])).data
    assert np.all(np.isfinite(y))
    np.testing.assert_allclose(y, [0.0, 0.5, 1.0])


def test_unknown_activation():
    with pytest.raises(ConfigError):
        tc.activation("gelu", Tensor([1.0]))


# ---------------------------------------------------------------- affine


def test_affine_identity(rng):
    x = rng.normal(size=(4, 3))
    assert np.array_equal(tc.affine(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3))).data, x)


def test_affine_hand_sum():
    out = tc.affine(Tensor([[1.0, 1.0]]), Tensor([[2.0], [3.0]]), Tensor([1.0]))
    assert out.data.tolist() == [[6.0]]


def test_affine_gradients(rng):
    x, W, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5)), rng.normal(size=5)
    proj = Tensor(rng.normal(size=(2, 3, 5)))

    def via(which):
        def f(t):
            args = [Tensor(x), Tensor(W), Tensor(b)]
            args[which] = t
            return tc.sum_all(tc.mul(tc.activation("tanh", tc.affine(*args)), proj))

        return f

    for which, value in enumerate((x, W, b)):
        assert gradient_check(via(which), value) < 1e-6


def test_affine_dimension_error():
    with pytest.raises(DimensionError):
        tc.affine(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))), Tensor(np.ones(5)))


# ---------------------------------------------------------------- backward


def test_backward_sum_gives_ones(rng):
    x = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    tc.sum_all(x).backward()
    assert np.array_equal(x.grad, np.ones((3, 2)))


def test_backward_square():
    x = Tensor([3.0], requires_grad=True)
    tc.sum_all(tc.mul(x, x)).backward()
    assert x.grad.tolist() == [6.0]


def test_backward_needs_scalar():
    with pytest.raises(ContractError):
        Tensor(np.ones(3), requires_grad=True).backward()


def test_shared_subexpression_doubles_gradient(rng):
    x = Tensor(rng.normal(size=4), requires_grad=True)
    y = tc.activation("tanh", x)
    tc.sum_all(y).backward()
    single = x.grad.copy()
    tc.zero_grad([x])
    y = tc.activation("tanh", x)
    tc.add(tc.sum_all(y), tc.sum_all(y)).backward()
    np.testing.assert_allclose(x.grad, 2 * single, rtol=0, atol=1e-15)


def test_repeated_backward_accumulates_until_zero_grad():
    x = Tensor([1.0, 2.0], requires_grad=True)
    tc.sum_all(x).backward()
    tc.sum_all(x).backward()
    assert x.grad.tolist() == [2.0, 2.0]
    tc.zero_grad([x])
    assert x.grad is None or not np.any(x.grad)


def test_composed_mgc_relu_sum_gradient(rng):
    from stedrmgc.model import mgc_forward, stack_graphs

    A = rng.random((2, 5, 5))
    a_cat = stack_graphs((A + A.transpose(0, 2, 1)) / 10)
    H = rng.uniform(0.5, 1.5, size=(2, 5, 3))
    # positive weights and inputs keep every ReLU argument away from the kink
    W = rng.uniform(0.1, 1.0, size=(6, 4))
    f = lambda t: tc.sum_all(mgc_forward(t, a_cat, Tensor(H), 2, "relu"))  # noqa: E731
    assert gradient_check(f, W) < 1e-5


# ---------------------------------------------------------------- gradient_check


def test_gradient_check_exact_quadratic(rng):
    assert gradient_check(lambda t: tc.mul(Tensor(0.5), tc.sum_squares(t)), rng.normal(size=6)) < 1e-9


def test_gradient_check_detects_wrong_gradient(rng):
    def bad(t):
        out = tc.sum_squares(t)
        out._backward = lambda g: (3.0 * g * t.data,)
        return out

    assert gradient_check(bad, rng.normal(size=4)) > 0.1


@settings(max_examples=20, deadline=None)
@given(
    arrays(
        np.float64,
        st.tuples(st.integers(1, 3), st.integers(1, 4)),
        # near-zero entries have gradients below the finite-difference noise floor
        elements=st.one_of(st.floats(-2, -0.05), st.floats(0.05, 2)),
    )
)
def test_elementwise_gradients_property(x):
    for kind in ("tanh", "sigmoid", "linear"):
        assert gradient_check(lambda t, k=kind: tc.sum_squares(tc.activation(k, t)), x) < 1e-5
