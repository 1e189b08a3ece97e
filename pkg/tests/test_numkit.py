import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pgcn import numkit as nk


def grad_of(build, **params):
    tape = nk.Tape()
    leaves = tape.watch(params)
    return nk.backward(tape, build(**leaves))


def numeric_grad(fn, x, eps=1e-5):
    out = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        plus, minus = x.copy(), x.copy()
        plus[idx] += eps
        minus[idx] -= eps
        out[idx] = (fn(plus) - fn(minus)) / (2 * eps)
    return out


def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(nk.matmul(a, np.eye(2)).value, a)


def test_relu_clamps():
    assert nk.relu(np.array([[-1.0, 0.0, 2.0]])).value.tolist() == [[0.0, 0.0, 2.0]]


def test_row_softmax_symmetric():
    assert nk.row_softmax(np.zeros((1, 2))).value.tolist() == [[0.5, 0.5]]


def test_shape_mismatch_raises():
    with pytest.raises(nk.ShapeError):
        nk.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(nk.ShapeError):
        nk.add(np.ones((2, 3)), np.ones((3, 2)))
    with pytest.raises(nk.ShapeError):
        nk.reshape(np.ones((2, 3)), (4, 2))


def test_non_finite_raises():
    with pytest.raises(nk.NonFiniteError):
        nk.log(np.array([[0.0, 1.0]]))
    with pytest.raises(nk.NonFiniteError), np.errstate(over="ignore"):
        nk.scalar_mul(np.array([[1e308]]), 10.0)


def test_grad_of_sum_is_ones():
    w = np.arange(6.0).reshape(2, 3)
    g = grad_of(lambda w: nk.sum_(w), w=w)["w"]
    assert np.array_equal(g, np.ones((2, 3)))


def test_dead_relu_has_zero_grad():
    g = grad_of(lambda w: nk.sum_(nk.relu(w)), w=-np.ones((3, 3)))["w"]
    assert np.array_equal(g, np.zeros((3, 3)))


def test_backward_requires_scalar():
    tape = nk.Tape()
    w = tape.leaf(np.ones((2, 2)), "w")
    with pytest.raises(nk.ShapeError):
        nk.backward(tape, nk.relu(w))


def test_unreachable_leaf_gets_zero():
    tape = nk.Tape()
    a = tape.leaf(np.ones((2, 2)), "a")
    tape.leaf(np.ones((3,)), "b")
    grads = nk.backward(tape, nk.sum_(a))
    assert np.array_equal(grads["b"], np.zeros(3))


def test_chain_matches_finite_differences():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))

    def value(v):
        return np.maximum(v @ b, 0).sum()

    g = grad_of(lambda a: nk.sum_(nk.relu(nk.matmul(a, nk.Tensor(b)))), a=a)["a"]
    num = numeric_grad(value, a)
    rel = np.abs(g - num) / np.maximum(1e-8, np.abs(g) + np.abs(num))
    assert rel.max() < 1e-6


PRIMITIVES = {
    "matmul": lambda x, c: nk.matmul(x, nk.Tensor(c[:4, :3])),
    "batched_matmul_left": lambda x, c: nk.matmul(nk.Tensor(np.stack([c[:4, :4], c[1:5, :4]])), x),
    "add_row_bias": lambda x, c: nk.add(nk.Tensor(np.ones((5, 4, 4))), x),
    "relu": lambda x, c: nk.relu(x),
    "concat": lambda x, c: nk.concat([x, nk.scalar_mul(x, 2.0)], axis=0),
    "reshape": lambda x, c: nk.reshape(x, (2, 8)),
    "slice": lambda x, c: nk.slice_(x, (slice(1, 3), slice(None, None, 2))),
    "fancy_slice": lambda x, c: nk.slice_(x, (np.array([0, 0, 3]), np.array([1, 1, 2]))),
    "row_softmax": lambda x, c: nk.row_softmax(x),
    "log_softmax": lambda x, c: nk.log_softmax(x),
    "log": lambda x, c: nk.log(nk.add(nk.relu(x), nk.Tensor(np.full((4, 4), 0.5)))),
    "sum_axis": lambda x, c: nk.sum_(x, axis=1),
    "scalar_mul": lambda x, c: nk.scalar_mul(x, -3.0),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_vjp_matches_finite_differences(name):
    rng = np.random.default_rng(7)
    c = rng.normal(size=(6, 6))
    x = rng.normal(size=(4, 4))
    x[np.abs(x) < 0.05] += 0.1  # keep clear of ReLU kinks
    weights = rng.normal(size=PRIMITIVES[name](nk.Tensor(x), c).shape)
    op = PRIMITIVES[name]

    def loss(x):
        out = op(x, c)
        flat = nk.reshape(out, (1, out.value.size))
        return nk.sum_(nk.matmul(flat, nk.Tensor(weights.reshape(-1, 1))))

    g = grad_of(loss, x=x)["x"]
    num = numeric_grad(lambda v: float(loss(nk.Tensor(v)).value), x)
    rel = np.abs(g - num) / np.maximum(1e-8, np.abs(g) + np.abs(num))
    assert rel.max() < 1e-6


def test_matmul_broadcast_grads_reduce_to_operand_shape():
    rng = np.random.default_rng(0)
    left, mid, right = rng.normal(size=(3, 3)), rng.normal(size=(4, 3, 2)), rng.normal(size=(2, 5))

    def loss(left, right):
        return nk.sum_(nk.matmul(nk.matmul(left, nk.Tensor(mid)), right))

    grads = grad_of(loss, left=left, right=right)
    assert grads["left"].shape == (3, 3) and grads["right"].shape == (2, 5)
    num = numeric_grad(lambda v: (v @ mid @ right).sum(), left)
    assert np.allclose(grads["left"], num, atol=1e-7)
    num = numeric_grad(lambda v: (left @ mid @ v).sum(), right)
    assert np.allclose(grads["right"], num, atol=1e-7)


def test_backward_is_linear_in_the_loss():
    rng = np.random.default_rng(11)
    w = rng.normal(size=(3, 4))
    inputs = nk.Tensor(rng.normal(size=(5, 3)))
    a, b = 0.7, -2.3

    def pair(w):
        h = nk.relu(nk.matmul(inputs, w))
        return nk.sum_(h), nk.sum_(nk.log_softmax(h))

    tape = nk.Tape()
    l1, l2 = pair(tape.leaf(w, "w"))
    g1 = nk.backward(tape, l1)["w"]
    g2 = nk.backward(tape, l2)["w"]
    g12 = nk.backward(tape, nk.add(nk.scalar_mul(l1, a), nk.scalar_mul(l2, b)))["w"]
    assert np.allclose(g12, a * g1 + b * g2, rtol=0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4, 2), elements=st.floats(-1e6, 1e6)))
def test_reshape_concat_slice_round_trip(x):
    t = nk.Tensor(x)
    back = nk.reshape(nk.reshape(t, (4, 6)), (3, 4, 2))
    assert back.value.tobytes() == x.tobytes()
    joined = nk.concat([t, t], axis=1)
    assert nk.slice_(joined, (slice(None), slice(0, 4))).value.tobytes() == x.tobytes()
    assert nk.slice_(joined, (slice(None), slice(4, 8))).value.tobytes() == x.tobytes()


def test_stop_gradient_blocks_path():
    tape = nk.Tape()
    w = tape.leaf(np.ones((2, 2)), "w")
    loss = nk.sum_(nk.add(nk.stop_gradient(w), nk.scalar_mul(w, 0.0)))
    assert np.array_equal(nk.backward(tape, loss)["w"], np.zeros((2, 2)))


def test_finite_diff_check_quadratic():
    err = nk.finite_diff_check(lambda tape, p: nk.sum_(nk.matmul(p["x"], p["x"])), {"x": np.array([[3.0]])})
    assert err < 1e-8


def test_finite_diff_check_constant_map():
    err = nk.finite_diff_check(lambda tape, p: nk.Tensor(np.array(2.0)), {"x": np.ones((2, 2))})
    assert err == 0.0


def test_finite_diff_check_detects_corrupted_vjp():
    rng = np.random.default_rng(2)
    params = {"w": rng.normal(size=(3, 3))}
    inputs = nk.Tensor(rng.normal(size=(4, 3)))

    def f(tape, p):
        return nk.sum_(nk.log_softmax(nk.matmul(inputs, p["w"])))

    assert nk.finite_diff_check(f, params) < 1e-6
    with nk.corrupt_vjp("matmul", 1.5):
        assert nk.finite_diff_check(f, params) > 1e-2


def test_finite_diff_check_rejects_bad_eps():
    with pytest.raises(ValueError):
        nk.finite_diff_check(lambda tape, p: nk.sum_(p["x"]), {"x": np.ones(2)}, eps=0)


def test_tensor_is_immutable():
    t = nk.Tensor(np.ones(3))
    with pytest.raises(ValueError):
        t.value[0] = 2.0


def test_kink_margin():
    tape = nk.Tape()
    x = tape.leaf(np.array([[0.5, -0.01]]), "x")
    nk.relu(x)
    assert nk.kink_margin(tape) == pytest.approx(0.01)
