import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from srno import tensor as T
from srno.errors import NumericError, ShapeError


def f64(rng, *shape):
    return T.Tensor(rng.standard_normal(shape), dtype=np.float64)


# --- forward oracles -------------------------------------------------------

def test_matmul_identity_and_hand_values():
    a = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(T.Tensor(np.eye(2)), a).data, a.data)
    assert T.matmul(T.Tensor([[1.0, 2.0]]), T.Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))


def test_layer_norm_hand_values():
    out = T.layer_norm(T.Tensor([[1.0, 2.0, 3.0]], dtype=np.float64),
                       T.Tensor(np.ones(3)), T.Tensor(np.zeros(3)), eps=0.0)
    np.testing.assert_allclose(out.data, [[-1.224744871391589, 0.0, 1.224744871391589]], rtol=1e-12)


def test_layer_norm_constant_row_is_zero():
    out = T.layer_norm(T.Tensor(np.full((2, 3), 7.0)), T.Tensor([3.0, -2.0, 5.0]), T.Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_conv_1x1_is_per_pixel_matmul(rng):
    x = rng.standard_normal((5, 6, 7)).astype(np.float32)
    w = rng.standard_normal((3, 5, 1, 1)).astype(np.float32)
    b = rng.standard_normal(3).astype(np.float32)
    out = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b)).data
    ref = (w[:, :, 0, 0] @ x.reshape(5, -1)).reshape(3, 6, 7) + b[:, None, None]
    np.testing.assert_allclose(out, ref, rtol=1e-5, atol=1e-5)


def test_conv_matches_direct_cross_correlation(rng):
    x = rng.standard_normal((2, 3, 5, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out = T.conv2d(T.Tensor(x, dtype=np.float64), T.Tensor(w, dtype=np.float64),
                   T.Tensor(b, dtype=np.float64), pad=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 5, 6))
    for i in range(5):
        for j in range(6):
            ref[:, :, i, j] = np.einsum("nchw,ochw->no", xp[:, :, i:i + 3, j:j + 3], w) + b
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_conv_zero_input_zero_output():
    out = T.conv2d(T.Tensor(np.zeros((2, 4, 4))), T.Tensor(np.ones((3, 2, 3, 3))), T.Tensor(np.zeros(3)), pad=1)
    assert out.shape == (3, 4, 4)
    np.testing.assert_array_equal(out.data, 0.0)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        T.conv2d(T.Tensor(np.zeros((2, 4, 4))), T.Tensor(np.ones((3, 5, 3, 3))), pad=1)


def test_pointwise_examples():
    assert T.pointwise("relu", T.Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]
    x = T.Tensor([1.5, -2.0])
    np.testing.assert_array_equal(T.pointwise("add", x, np.zeros(2)).data, x.data)


def test_broadcast_only_over_leading_dims():
    a = T.Tensor(np.ones((4, 3)))
    assert T.add(a, T.Tensor(np.arange(3.0))).shape == (4, 3)
    with pytest.raises(ShapeError):
        T.add(a, T.Tensor(np.ones((4, 1))))


# --- gradient oracles -------------------------------------------------------

def test_grad_check_closed_form():
    x = T.Tensor([1.0, 2.0], dtype=np.float64)
    err = T.grad_check(lambda: T.sum_all(T.mul(x, x)), [x])
    np.testing.assert_allclose(x.grad, [2.0, 4.0], rtol=1e-12)
    assert err < 1e-8


def test_grad_check_constant_function_has_zero_grad():
    x = T.Tensor([1.0, 2.0], dtype=np.float64)
    err = T.grad_check(lambda: T.Tensor(3.0, dtype=np.float64), [x])
    np.testing.assert_array_equal(x.grad, 0.0)
    assert err == 0.0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grad_check_raises_on_non_finite():
    x = T.Tensor([1e308, 1.0], dtype=np.float64)
    with pytest.raises(NumericError):
        T.grad_check(lambda: T.sum_all(T.mul(x, x)), [x])


@pytest.mark.parametrize("case", ["matmul", "layer_norm", "conv2d", "relu", "gelu", "add", "mul",
                                  "scale", "abs", "linear", "gather", "concat", "transpose",
                                  "batched_matmul", "mean"])
def test_primitive_gradients(case, rng):
    a, b = f64(rng, 5, 7), f64(rng, 7, 3)
    if case == "matmul":
        ins, f = [a, b], lambda: T.sum_all(T.mul(T.matmul(a, b), T.matmul(a, b)))
    elif case == "layer_norm":
        x, g, be = f64(rng, 4, 8), f64(rng, 8), f64(rng, 8)
        w = rng.standard_normal((4, 8))
        ins, f = [x, g, be], lambda: T.sum_all(T.mul(T.layer_norm(x, g, be, 1e-5), w))
    elif case == "conv2d":
        x, w, bb = f64(rng, 2, 6, 6), f64(rng, 3, 2, 3, 3), f64(rng, 3)
        m = rng.standard_normal((3, 6, 6))
        ins, f = [x, w, bb], lambda: T.sum_all(T.mul(T.conv2d(x, w, bb, pad=1), m))
    elif case in ("relu", "gelu", "abs"):
        x = f64(rng, 6, 5)
        fn = {"relu": T.relu, "gelu": T.gelu, "abs": T.absolute}[case]
        m = rng.standard_normal((6, 5))
        ins, f = [x], lambda: T.sum_all(T.mul(fn(x), m))
    elif case == "add":
        x, y = f64(rng, 3, 4), f64(rng, 4)
        ins, f = [x, y], lambda: T.sum_all(T.mul(T.add(x, y), T.add(x, y)))
    elif case == "mul":
        x, y = f64(rng, 3, 4), f64(rng, 3, 4)
        ins, f = [x, y], lambda: T.sum_all(T.mul(x, T.mul(x, y)))
    elif case == "scale":
        x = f64(rng, 3, 4)
        ins, f = [x], lambda: T.sum_all(T.mul(T.scale(x, 0.3), x))
    elif case == "linear":
        x, w, bb = f64(rng, 2, 5, 4), f64(rng, 4, 3), f64(rng, 3)
        ins, f = [x, w, bb], lambda: T.sum_all(T.gelu(T.linear(x, w, bb)))
    elif case == "gather":
        x = f64(rng, 6, 3)
        idx = np.array([0, 5, 5, 2, 0, 1])
        m = rng.standard_normal((6, 3))
        ins, f = [x], lambda: T.sum_all(T.mul(T.gather_rows(x, idx), m))
    elif case == "concat":
        x, y = f64(rng, 3, 2), f64(rng, 3, 4)
        m = rng.standard_normal((3, 6))
        ins, f = [x, y], lambda: T.sum_all(T.mul(T.concat([x, y], -1), m))
    elif case == "transpose":
        x = f64(rng, 2, 3, 4)
        m = rng.standard_normal((4, 2, 3))
        ins, f = [x], lambda: T.sum_all(T.mul(T.transpose(x, (2, 0, 1)), m))
    elif case == "batched_matmul":
        x, y = f64(rng, 2, 3, 5, 4), f64(rng, 2, 3, 4, 2)
        ins, f = [x, y], lambda: T.sum_all(T.gelu(T.matmul(x, y)))
    else:
        x = f64(rng, 4, 5)
        ins, f = [x], lambda: T.mean_all(T.mul(x, x))
    err = T.grad_check(f, ins)
    assert err.checked > 0
    assert err.skipped <= 0.25 * (err.checked + err.skipped)
    assert err < 1e-5, f"{case}: {float(err)}"


def test_tape_order_independence(rng):
    # same DAG, branches recorded in opposite order
    x = f64(rng, 3, 3)

    def run(flip):
        x.grad = None
        x.requires_grad = True
        with T.Tape() as tape:
            branches = [lambda: T.gelu(x), lambda: T.matmul(x, x)]
            if flip:
                branches = branches[::-1]
            outs = [b() for b in branches]
            tape.backward(T.sum_all(T.add(outs[0], outs[1])))
        return x.grad.copy()

    np.testing.assert_allclose(run(False), run(True), rtol=0, atol=1e-14)


def test_backward_fills_zero_grads_for_unused_inputs(rng):
    x, y = f64(rng, 2), f64(rng, 2)
    x.requires_grad = y.requires_grad = True
    with T.Tape() as tape:
        out = T.sum_all(T.mul(x, x))
        _ = T.mul(y, 0.0)
        tape.backward(out)
    assert y.grad is not None and np.all(y.grad == 0)


def test_no_recording_without_tape(rng):
    x = f64(rng, 2)
    x.requires_grad = True
    out = T.mul(x, x)
    assert T.active_tape() is None
    assert out.grad is None


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_matmul_associativity_f32(n, k, m, seed):
    r = np.random.default_rng(seed)
    a, b, c = (r.standard_normal(s).astype(np.float32) for s in [(n, k), (k, m), (m, 5)])
    left = T.matmul(T.matmul(T.Tensor(a), T.Tensor(b)), T.Tensor(c)).data
    right = T.matmul(T.Tensor(a), T.matmul(T.Tensor(b), T.Tensor(c))).data
    ref = np.abs(a.astype(np.float64) @ (b.astype(np.float64) @ c.astype(np.float64))).max()
    scale = max(ref, np.abs(a).max() * np.abs(b).max() * np.abs(c).max())
    assert np.abs(left - right).max() / scale < 1e-5
