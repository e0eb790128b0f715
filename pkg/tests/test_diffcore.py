import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chargeforecast import diffcore as dc

SEEDS = st.integers(min_value=0, max_value=2**32 - 1)


def away_from_zero(a, gap=0.05):
    return a + np.sign(a) * gap


def weighted(out, rng):
    """sum(out * R) for a fixed random R, so every output entry matters."""
    R = rng.normal(size=out.shape)
    return dc.sum(out * R)


# each entry: (parameter shapes, builder(params, rng) -> output tensor)
def _masked(p, rng):
    mask = rng.random((3, 4)) < 0.6
    mask[:, 0] = True
    return dc.masked_softmax(p["a"], mask)


def _segsoft(p, rng):
    return dc.segment_softmax(p["a"], np.array([0, 2, 3]), axis=-1)


OPS = {
    "add": ({"a": (3, 4), "b": (4,)}, lambda p, r: p["a"] + p["b"]),
    "sub": ({"a": (3, 4), "b": (3, 1)}, lambda p, r: p["a"] - p["b"]),
    "mul": ({"a": (3, 4), "b": (3, 4)}, lambda p, r: p["a"] * p["b"]),
    "scalar_broadcast": ({"a": (3, 4), "s": ()}, lambda p, r: p["a"] * p["s"] + p["s"]),
    "square": ({"a": (2, 5)}, lambda p, r: dc.square(p["a"])),
    "matmul": ({"a": (3, 4), "b": (4, 2)}, lambda p, r: dc.matmul(p["a"], p["b"])),
    "batched_matmul": ({"a": (2, 3, 4), "b": (4, 2)}, lambda p, r: dc.matmul(p["a"], p["b"])),
    "sigmoid": ({"a": (3, 4)}, lambda p, r: dc.sigmoid(p["a"])),
    "tanh": ({"a": (3, 4)}, lambda p, r: dc.tanh(p["a"])),
    "leaky_relu": ({"a": (3, 4)}, lambda p, r: dc.leaky_relu(p["a"], 0.2)),
    "sum_axis": ({"a": (3, 4)}, lambda p, r: dc.sum(p["a"], axis=0)),
    "mean": ({"a": (3, 4)}, lambda p, r: dc.mean(p["a"], axis=-1)),
    "softmax": ({"a": (3, 4)}, lambda p, r: dc.softmax(p["a"])),
    "masked_softmax": ({"a": (3, 4)}, _masked),
    "segment_softmax": ({"a": (2, 4)}, _segsoft),
    "segment_sum": ({"a": (2, 4, 3)}, lambda p, r: dc.segment_sum(p["a"], np.array([0, 1, 3]), axis=-2)),
    "take": ({"a": (2, 4)}, lambda p, r: dc.take(p["a"], np.array([3, 0, 0, 2, 3]), axis=-1)),
    "conv2d": ({"x": (2, 5, 3), "k": (2, 2, 3)}, lambda p, r: dc.conv2d(p["x"], p["k"])),
    "conv2d_stride": ({"x": (4, 3), "k": (2, 2, 3)}, lambda p, r: dc.conv2d(p["x"], p["k"], stride=(2, 1))),
    "transpose": ({"a": (2, 3, 4)}, lambda p, r: dc.transpose(p["a"], (2, 0, 1))),
    "reshape": ({"a": (2, 6)}, lambda p, r: dc.reshape(p["a"], (3, 4))),
    "getitem": ({"a": (3, 4)}, lambda p, r: p["a"][1:, ::2]),
    "concat": ({"a": (2, 3), "b": (2, 1)}, lambda p, r: dc.concat([p["a"], p["b"]], axis=-1)),
    "stack": ({"a": (2, 3), "b": (2, 3)}, lambda p, r: dc.stack([p["a"], p["b"]], axis=-1)),
}


@pytest.mark.parametrize("op", sorted(OPS))
@settings(max_examples=100)
@given(seed=SEEDS)
def test_op_gradient_matches_finite_differences(op, seed):
    shapes, build = OPS[op]
    rng = np.random.default_rng(seed)
    params = {k: away_from_zero(rng.normal(size=s)) for k, s in shapes.items()}
    R_seed = int(rng.integers(2**31))

    def loss(p):
        r = np.random.default_rng(R_seed)
        return weighted(build(p, r), r)

    report = dc.check_gradients(params, loss, eps=1e-5, tol=1e-4)
    assert report.passed, (op, report.per_param)


def test_forward_examples():
    assert np.array_equal(dc.matmul([[1.0, 2.0], [3.0, 4.0]], np.eye(2)).data, [[1, 2], [3, 4]])
    assert np.array_equal(dc.concat([[1.0, 2.0], [3.0]]).data, [1, 2, 3])
    assert dc.sigmoid(0.0).item() == 0.5


def test_backward_examples():
    x = dc.parameter(3.0)
    assert dc.backward(x * x, {"x": x})["x"] == pytest.approx(6.0)

    W = dc.parameter(np.arange(4.0).reshape(2, 2))
    g = dc.backward(dc.sum(dc.matmul(W, dc.constant([[1.0], [0.0]]))), {"W": W})["W"]
    assert np.array_equal(g, [[1, 0], [1, 0]])

    x = dc.parameter(-2.0)
    assert dc.backward(dc.leaky_relu(x, 0.01), {"x": x})["x"] == pytest.approx(0.01)


def test_backward_requires_scalar_root():
    x = dc.parameter(np.ones(3))
    with pytest.raises(ValueError):
        dc.backward(x * 2.0, {"x": x})


def test_fan_out_accumulates():
    rng = np.random.default_rng(5)
    a = rng.normal(size=(3, 3))
    x = dc.parameter(a)
    paths = [lambda t: dc.sum(dc.sigmoid(t)), lambda t: dc.sum(t * t),
             lambda t: dc.sum(dc.matmul(t, t))]
    total = dc.backward(paths[0](x) + paths[1](x) + paths[2](x), {"x": x})["x"]
    single = sum(dc.backward(f(leaf), {"x": leaf})["x"] for f in paths for leaf in [dc.parameter(a)])
    assert np.allclose(total, single, atol=1e-12)


def test_unreached_leaf_gets_zero_gradient():
    x, y = dc.parameter(np.ones(2)), dc.parameter(np.ones(3))
    g = dc.backward(dc.sum(x), {"x": x, "y": y})
    assert np.array_equal(g["y"], np.zeros(3))


def test_shape_error_names_op():
    with pytest.raises(dc.ShapeError, match="matmul"):
        dc.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(dc.ShapeError, match="add"):
        dc.add(np.ones((2, 3)), np.ones((4,)))


def test_forward_is_deterministic():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    out1 = dc.tanh(dc.matmul(a, b)).data
    out2 = dc.tanh(dc.matmul(a, b)).data
    assert out1.tobytes() == out2.tobytes()


def test_backward_does_not_mutate_forward_values():
    x = dc.parameter(np.array([0.5, -1.0, 2.0]))
    h = dc.sigmoid(x)
    before = h.data.copy()
    dc.backward(dc.sum(h * h), {"x": x})
    assert np.array_equal(h.data, before)


def test_check_gradients_constant_loss():
    report = dc.check_gradients({"a": np.ones(4)}, lambda p: dc.sum(p["a"] * 0.0) + 3.0)
    assert report.max_rel_error == 0.0


def test_check_gradients_quadratic_linear_layer():
    rng = np.random.default_rng(3)
    x, y = rng.normal(size=(6, 3)), rng.normal(size=(6, 2))
    W = rng.normal(size=(3, 2))

    def loss(p):
        r = dc.matmul(x, p["W"]) - y
        return dc.mean(r * r)

    leaves = {"W": dc.parameter(W)}
    analytic = dc.backward(loss(leaves), leaves)["W"]
    closed = 2.0 * x.T @ (x @ W - y) / y.size
    assert np.allclose(analytic, closed, rtol=1e-12, atol=1e-14)
    report = dc.check_gradients({"W": W}, loss, eps=1e-5, tol=1e-7)
    assert report.max_rel_error < 1e-7


def test_check_gradients_rejects_bad_eps():
    with pytest.raises(ValueError):
        dc.check_gradients({"a": np.ones(1)}, lambda p: dc.sum(p["a"]), eps=0.0)


def test_tensor_invariants():
    t = dc.sigmoid(np.linspace(-3, 3, 12).reshape(3, 4))
    assert int(np.prod(t.shape)) == t.data.size
    assert np.all(np.isfinite(t.data))
