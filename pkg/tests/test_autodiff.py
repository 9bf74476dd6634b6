import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import naive_conv2d
from sftlab.autodiff import ShapeError, Tape, Tensor, grad_check, no_grad, ops, precision
from sftlab.autodiff.ops import _result
from sftlab.autodiff.gradcheck import EvaluationError


def test_matmul_identity_and_selector():
    a = Tensor(np.eye(2))
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ops.matmul(a, b).data, [[1, 2], [3, 4]])
    np.testing.assert_array_equal((Tensor([[1.0, 0.0]]) @ Tensor([[2.0], [5.0]])).data, [[2.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ops.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_sum_gradient_is_row_broadcast_of_column_sums(wide):
    rng = np.random.default_rng(3)
    a0, b0 = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    a = Tensor(a0, requires_grad=True)
    with Tape() as tape:
        y = ops.sum(a @ Tensor(b0))
    tape.backward(y)
    np.testing.assert_allclose(a.grad, np.tile(b0.sum(axis=1), (3, 1)))
    assert grad_check(lambda p: ops.sum(p["a"] @ p["b"]), {"a": a0, "b": b0}) <= 1e-9


def test_layer_norm_cases():
    col = np.array([[1.0], [-1.0]])  # mean 0, population variance 1
    out = ops.layer_norm(Tensor(col), Tensor(np.ones(2)), Tensor(np.zeros(2)))
    np.testing.assert_allclose(out.data, col, atol=1e-5)
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    out = ops.layer_norm(x, Tensor(np.zeros(3)), Tensor(np.full(3, 2.5)))
    np.testing.assert_array_equal(out.data, np.full((3, 4), 2.5))
    with precision("wide"):
        out = ops.layer_norm(Tensor([[1.0], [3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
        np.testing.assert_allclose(out.data[:, 0], [-1.0, 1.0], atol=1e-9)
    with pytest.raises(ShapeError):
        ops.layer_norm(Tensor(np.zeros((0, 3))), Tensor(np.zeros(0)), Tensor(np.zeros(0)))


def test_log_softmax_cases(wide):
    np.testing.assert_allclose(ops.log_softmax(Tensor([[0.0], [0.0]])).data[:, 0], np.log([0.5, 0.5]))
    out = ops.log_softmax(Tensor([[1000.0], [0.0]])).data[:, 0]
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [0.0, -1000.0], atol=1e-12)
    p = np.exp(ops.log_softmax(Tensor([[1.0], [2.0], [3.0]])).data[:, 0])
    np.testing.assert_allclose(p, [0.0900306, 0.2447285, 0.6652410], atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (5, 3), elements=st.floats(-1e4, 1e4)))
def test_log_softmax_columns_normalised(x):
    with precision("wide"):
        p = np.exp(ops.log_softmax(Tensor(x)).data)
    np.testing.assert_allclose(p.sum(axis=0), 1.0, atol=1e-6)


def test_conv2d_cases(wide):
    ones = ops.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), stride=1, pad=0)
    np.testing.assert_array_equal(ones.data, [[[9.0]]])
    zero = ops.conv2d(Tensor(np.ones((2, 5, 7))), Tensor(np.zeros((3, 2, 3, 3))), stride=2, pad=1)
    assert zero.shape == (3, 3, 4) and not zero.data.any()
    rng = np.random.default_rng(1)
    x, w = rng.normal(size=(1, 6, 6)), rng.normal(size=(2, 1, 3, 3))
    out = ops.conv2d(Tensor(x), Tensor(w), stride=2, pad=1)
    assert out.shape == (2, 3, 3)
    np.testing.assert_allclose(out.data, naive_conv2d(x, w, 2, 1), atol=1e-12)
    with pytest.raises(ShapeError):
        ops.conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))), stride=1, pad=0)


def test_backward_cases():
    x = Tensor(3.0, requires_grad=True)
    with Tape() as tape:
        y = ops.square(x)
    tape.backward(y)
    assert x.grad == pytest.approx(6.0)

    rng = np.random.default_rng(2)
    xs = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    gamma = Tensor(rng.normal(size=4), requires_grad=True)
    beta = Tensor(np.zeros(4), requires_grad=True)
    with Tape() as tape:
        y = ops.sum(ops.layer_norm(xs, gamma, beta))
    tape.backward(y)
    np.testing.assert_allclose(beta.grad, np.full(4, 5.0))

    a = Tensor(2.0, requires_grad=True)
    unused = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = ops.scale(a, 4.0)
        ops.sum(unused)
    (ga, gu) = tape.backward(y, [a, unused])
    assert ga == 4.0
    np.testing.assert_array_equal(gu, np.zeros(3))
    np.testing.assert_array_equal(unused.grad, np.zeros(3))


def test_backward_rejects_non_scalar_root():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = ops.scale(x, 2.0)
    with pytest.raises(ValueError, match="scalar"):
        tape.backward(y)


def test_backward_visits_each_entry_once():
    rng = np.random.default_rng(0)
    w = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    with Tape() as tape:
        h = ops.tanh(w @ w)
        y = ops.sum(ops.relu(h) * h)
    tape.backward(y)
    assert tape.visits == len(tape) == 5


def test_no_grad_records_nothing():
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        with no_grad():
            ops.sum(w @ w)
    assert len(tape) == 0


def test_forward_is_deterministic():
    rng = np.random.default_rng(5)
    x, g = rng.normal(size=(6, 7)), rng.normal(size=6)
    run = lambda: ops.log_softmax(ops.layer_norm(Tensor(x), Tensor(g), Tensor(g))).data.tobytes()
    assert run() == run()


def test_grad_check_linear_and_composite(wide):
    rng = np.random.default_rng(4)
    point = {"x": rng.normal(size=(3, 4)), "c": rng.normal(size=(3, 4))}
    assert grad_check(lambda p: ops.sum(ops.mul(p["x"], p["c"])), point) <= 1e-9
    ln_point = {"x": rng.normal(size=(5, 3)), "g": rng.normal(size=5), "b": rng.normal(size=5)}
    err = grad_check(
        lambda p: ops.sum(ops.square(ops.layer_norm(p["x"], p["g"], p["b"]))), ln_point
    )
    assert err <= 1e-4


def _corrupt_matmul(a, b):
    ad, bd = a.data, b.data
    return _result("matmul", ad @ bd, (a, b), lambda g: (1.1 * (g @ bd.T), ad.T @ g))


def test_grad_check_detects_corrupted_rule(wide):
    rng = np.random.default_rng(6)
    point = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4, 2))}
    assert grad_check(lambda p: ops.sum(ops.square(_corrupt_matmul(p["a"], p["b"]))), point) > 1e-2


def test_grad_check_rejects_non_finite(wide):
    with pytest.raises(EvaluationError):
        grad_check(lambda p: ops.sum(ops.log(p["x"])), {"x": np.array([-1.0, 2.0])})


def test_grad_check_requires_wide_precision():
    with precision("single"):
        with pytest.raises(RuntimeError):
            grad_check(lambda p: ops.sum(p["x"]), {"x": np.ones(2)})


def _rand(rng, *shape):
    return rng.normal(size=shape)


# (name, point builder, objective); objectives reduce with random weights so
# every output element carries a distinct upstream gradient
PRIMITIVES = [
    ("add", lambda r: {"a": _rand(r, 3, 4), "b": _rand(r, 3, 4)}, lambda p, w: ops.add(p["a"], p["b"])),
    ("sub", lambda r: {"a": _rand(r, 3, 4), "b": _rand(r, 3, 4)}, lambda p, w: ops.sub(p["a"], p["b"])),
    ("mul", lambda r: {"a": _rand(r, 3, 4), "b": _rand(r, 3, 4)}, lambda p, w: ops.mul(p["a"], p["b"])),
    ("scale", lambda r: {"a": _rand(r, 3, 4)}, lambda p, w: ops.scale(p["a"], -1.7)),
    ("square", lambda r: {"a": _rand(r, 3, 4)}, lambda p, w: ops.square(p["a"])),
    ("relu", lambda r: {"a": _rand(r, 3, 4)}, lambda p, w: ops.relu(p["a"])),
    ("tanh", lambda r: {"a": _rand(r, 3, 4)}, lambda p, w: ops.tanh(p["a"])),
    ("sigmoid", lambda r: {"a": _rand(r, 3, 4)}, lambda p, w: ops.sigmoid(p["a"])),
    ("swish", lambda r: {"a": _rand(r, 3, 4)}, lambda p, w: ops.swish(p["a"])),
    ("exp", lambda r: {"a": _rand(r, 3, 4)}, lambda p, w: ops.exp(p["a"])),
    ("log", lambda r: {"a": np.abs(_rand(r, 3, 4)) + 0.5}, lambda p, w: ops.log(p["a"])),
    ("glu", lambda r: {"a": _rand(r, 6, 4)}, lambda p, w: ops.glu(p["a"])),
    ("matmul", lambda r: {"a": _rand(r, 3, 4), "b": _rand(r, 4, 2)}, lambda p, w: ops.matmul(p["a"], p["b"])),
    ("bmm", lambda r: {"a": _rand(r, 2, 3, 4), "b": _rand(r, 2, 4, 5)}, lambda p, w: ops.bmm(p["a"], p["b"])),
    ("transpose", lambda r: {"a": _rand(r, 2, 3, 4)}, lambda p, w: ops.transpose(p["a"], (1, 2, 0))),
    ("reshape", lambda r: {"a": _rand(r, 3, 4)}, lambda p, w: ops.reshape(p["a"], (2, 6))),
    ("add_bias", lambda r: {"a": _rand(r, 3, 4), "b": _rand(r, 4)}, lambda p, w: ops.add_bias(p["a"], p["b"], axis=1)),
    ("take", lambda r: {"a": _rand(r, 3, 4)}, lambda p, w: ops.take(p["a"], [2, 0, 2, 1], axis=1)),
    ("concat", lambda r: {"a": _rand(r, 3, 2), "b": _rand(r, 3, 4)}, lambda p, w: ops.concat([p["a"], p["b"]], axis=1)),
    ("pick", lambda r: {"a": _rand(r, 3, 4)}, lambda p, w: ops.pick(p["a"], [0, 2, 2, 1], [1, 0, 0, 3])),
    ("sum", lambda r: {"a": _rand(r, 3, 4)}, lambda p, w: ops.sum(p["a"])),
    ("mean", lambda r: {"a": _rand(r, 3, 4)}, lambda p, w: ops.mean(p["a"])),
    (
        "layer_norm",
        lambda r: {"x": _rand(r, 5, 3), "g": _rand(r, 5), "b": _rand(r, 5)},
        lambda p, w: ops.layer_norm(p["x"], p["g"], p["b"]),
    ),
    ("log_softmax", lambda r: {"a": _rand(r, 4, 3)}, lambda p, w: ops.log_softmax(p["a"], axis=0)),
    ("softmax", lambda r: {"a": _rand(r, 4, 3)}, lambda p, w: ops.softmax(p["a"], axis=0)),
    (
        "softmax_masked",
        lambda r: {"a": _rand(r, 4, 4)},
        lambda p, w: ops.softmax(p["a"], axis=0, mask=np.tril(np.ones((4, 4), bool)).T),
    ),
    (
        "conv2d",
        lambda r: {"x": _rand(r, 2, 2, 6, 5), "k": _rand(r, 3, 2, 3, 3)},
        lambda p, w: ops.conv2d(p["x"], p["k"], stride=2, pad=1),
    ),
    (
        "conv2d_stride1",
        lambda r: {"x": _rand(r, 1, 5, 4), "k": _rand(r, 2, 1, 3, 3)},
        lambda p, w: ops.conv2d(p["x"], p["k"], stride=1, pad=0),
    ),
    (
        "depthwise_conv1d",
        lambda r: {"x": _rand(r, 3, 7), "k": _rand(r, 3, 5)},
        lambda p, w: ops.depthwise_conv1d(p["x"], p["k"], [4, 3]),
    ),
]


@pytest.mark.parametrize("name,build,fn", PRIMITIVES, ids=[p[0] for p in PRIMITIVES])
def test_primitive_gradients(wide, name, build, fn):
    for seed in range(10):
        rng = np.random.default_rng(seed)
        point = build(rng)
        with no_grad():
            shape = fn({k: Tensor(v) for k, v in point.items()}, None).shape
        weights = Tensor(rng.normal(size=shape))

        def objective(p):
            out = fn(p, weights)
            return ops.sum(ops.mul(out, weights)) if out.shape else out

        assert grad_check(objective, point) <= 1e-4, f"{name} seed {seed}"


def test_depthwise_conv_respects_segments(wide):
    x = np.arange(12, dtype=float).reshape(2, 6)
    w = np.ones((2, 3))
    out = ops.depthwise_conv1d(Tensor(x), Tensor(w), [3, 3]).data
    expect = np.concatenate([ops.depthwise_conv1d(Tensor(x[:, :3]), Tensor(w)).data,
                             ops.depthwise_conv1d(Tensor(x[:, 3:]), Tensor(w)).data], axis=1)
    np.testing.assert_array_equal(out, expect)
    delta = np.zeros((2, 3))
    delta[:, 1] = 1.0
    np.testing.assert_array_equal(ops.depthwise_conv1d(Tensor(x), Tensor(delta), [3, 3]).data, x)


def test_strict_shapes():
    with pytest.raises(ShapeError):
        ops.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))
    assert ops.add(Tensor(np.ones((2, 3))), 1.0).data.sum() == 12.0
