import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from despeckle import tensor as T
from despeckle.tensor import Tensor

from conftest import central_diff, rel_err


def away_from_zero(rng, shape, low=0.05):
    x = rng.uniform(-2, 2, size=shape)
    return np.where(np.abs(x) < low, np.sign(x + 1e-12) * low, x)


# ---------------------------------------------------------------- conv2d


def test_conv_identity_1x1(rng):
    x = rng.normal(size=(3, 5, 6))
    k = np.zeros((3, 3, 1, 1))
    k[[0, 1, 2], [0, 1, 2]] = 1.0
    out = T.conv2d(Tensor(x), Tensor(k))
    assert np.array_equal(out.data, x)


def test_conv_row_above_shift_impulse():
    x = np.zeros((1, 7, 7))
    x[0, 3, 3] = 1.0
    k = np.ones((1, 1, 1, 3))
    out = T.conv2d(Tensor(x), Tensor(k), np.ones((1, 3)), shift=(-1, 0)).data[0]
    assert set(zip(*np.nonzero(out))) == {(4, 2), (4, 3), (4, 4)}


def test_conv_masked_center_ignores_impulse(rng):
    x = np.zeros((1, 5, 5))
    x[0, 2, 2] = 1.0
    k = rng.normal(size=(4, 1, 3, 3))
    mask = np.ones((3, 3))
    mask[1, 1] = 0
    out = T.conv2d(Tensor(x), Tensor(k), mask).data
    # direct evaluation: only the centre tap could read the impulse at its own location
    assert np.all(out[:, 2, 2] == 0.0)
    unmasked = T.conv2d(Tensor(x), Tensor(k)).data
    assert np.allclose(unmasked[:, 2, 2], k[:, 0, 1, 1])


def test_conv_matches_naive_loops(rng):
    x = rng.normal(size=(2, 3, 6, 7))
    k = rng.normal(size=(4, 3, 2, 3))
    b = rng.normal(size=4)
    mask = np.array([[1, 0, 1], [1, 1, 0]], dtype=bool)
    shift = (1, -1)
    out = T.conv2d(Tensor(x), Tensor(k), mask, shift, Tensor(b)).data
    ref = np.zeros_like(out)
    n, c, h, w = x.shape
    for ni in range(n):
        for o in range(4):
            for y in range(h):
                for xx in range(w):
                    acc = b[o]
                    for ci in range(c):
                        for u in range(2):
                            for v in range(3):
                                if not mask[u, v]:
                                    continue
                                yy, xs = y + u - 1 + shift[0], xx + v - 1 + shift[1]
                                if 0 <= yy < h and 0 <= xs < w:
                                    acc += k[o, ci, u, v] * x[ni, ci, yy, xs]
                    ref[ni, o, y, xx] = acc
    assert np.allclose(out, ref, atol=1e-12)


def test_conv_errors():
    with pytest.raises(ValueError):
        T.conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 1, 1))))
    with pytest.raises(ValueError):
        T.conv2d(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), mask=np.ones((2, 2)))
    with pytest.raises(ValueError):
        Tensor(np.ones((1, 0, 4)))


@settings(max_examples=25, deadline=None)
@given(
    seed=st.integers(0, 2**31),
    kh=st.integers(1, 3),
    kw=st.integers(1, 3),
    alpha=st.floats(-3, 3),
    beta=st.floats(-3, 3),
)
def test_conv_bilinear(seed, kh, kw, alpha, beta):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 6, 5)), rng.normal(size=(2, 6, 5))
    k1, k2 = rng.normal(size=(3, 2, kh, kw)), rng.normal(size=(3, 2, kh, kw))
    conv = lambda x, k: T.conv2d(Tensor(x), Tensor(k)).data
    assert np.allclose(conv(alpha * a + beta * b, k1), alpha * conv(a, k1) + beta * conv(b, k1), atol=1e-12)
    assert np.allclose(conv(a, alpha * k1 + beta * k2), alpha * conv(a, k1) + beta * conv(a, k2), atol=1e-12)


# ---------------------------------------------------------------- scale_add and elementwise


def test_scale_add_examples(rng):
    y = rng.normal(size=(3, 4))
    assert np.array_equal(T.scale_add([Tensor(y)]).data, y)
    assert np.all(T.scale_add([Tensor(y), Tensor(-y)]).data == 0.0)
    with pytest.raises(ValueError):
        T.scale_add([])
    with pytest.raises(ValueError):
        T.scale_add([Tensor(np.ones(3)), Tensor(np.ones(4))])


def test_scale_add_preserves_variance(rng):
    ys = [Tensor(rng.standard_normal((64, 64, 64))) for _ in range(4)]
    for y in ys:
        assert 0.9 <= np.var(y.data) <= 1.1
    assert 0.7 <= np.var(T.scale_add(ys).data) <= 1.3
    assert 3.5 <= np.var(T.plain_add(ys).data) <= 4.5


def test_relu_and_geometry():
    assert np.array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
    img = np.arange(12.0).reshape(3, 4)
    assert np.array_equal(T.rotate180(T.rotate180(Tensor(img))).data, img)
    t = Tensor(img)
    for _ in range(4):
        t = T.rot90k(t, 1)
    assert np.array_equal(t.data, img)
    assert np.array_equal(T.rot90k(Tensor(img), 4).data, img)
    assert np.array_equal(T.rot90k(Tensor(img), 2).data, T.rotate180(Tensor(img)).data)
    assert np.array_equal(T.flip_h(Tensor(img)).data, img[:, ::-1])
    assert np.array_equal(T.flip_v(Tensor(img)).data, img[::-1])


def test_binary_shape_mismatch():
    with pytest.raises(ValueError):
        T.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(ValueError):
        T.mul(Tensor(np.ones(3)), Tensor(np.ones((3, 1))))


# ---------------------------------------------------------------- backward


def test_hand_chain_rule():
    w = Tensor(np.array([1.0]), requires_grad=True)
    loss = T.mean(T.square(w * Tensor(np.array([2.0]))))
    T.backward(loss)
    assert w.grad[0] == 8.0


def test_scale_add_gradient():
    ys = [Tensor(np.ones((2, 2)), requires_grad=True) for _ in range(5)]
    T.backward(T.total(T.scale_add(ys)))
    for y in ys:
        assert np.allclose(y.grad, 1 / math.sqrt(5))


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        T.backward(T.relu(x))


def test_graph_is_topological():
    x = Tensor(np.ones(3), requires_grad=True)
    y = T.relu(x) * T.square(x)
    nodes = T.graph(T.mean(y))
    pos = {id(n): i for i, n in enumerate(nodes)}
    for n in nodes:
        for p in n._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(n)]
    assert len({id(n) for n in nodes}) == len(nodes)


def _unary_cases():
    return {
        "square": lambda t: T.square(t),
        "relu": lambda t: T.relu(t),
        "scale": lambda t: T.scale(t, -1.7),
        "add_scalar": lambda t: t + 0.3,
        "rotate180": lambda t: T.rotate180(t),
        "rot90k": lambda t: T.rot90k(t, 1),
        "rot270": lambda t: T.rot90k(t, 3),
        "flip_h": lambda t: T.flip_h(t),
        "flip_v": lambda t: T.flip_v(t),
        "reshape": lambda t: T.reshape(t, (3, 20)),
        "channel": lambda t: T.channel(T.reshape(t, (1, 3, 4, 5)), 1),
        "mean": lambda t: T.mean(t),
        "total": lambda t: T.total(t),
    }


@pytest.mark.parametrize("name", sorted(_unary_cases()))
def test_unary_gradients(name, rng):
    op = _unary_cases()[name]
    x = away_from_zero(rng, (3, 4, 5))
    probe_shape = op(Tensor(x)).shape
    r = rng.normal(size=probe_shape)

    def f():
        return float(np.sum(op(Tensor(x)).data * r))

    xt = Tensor(x, requires_grad=True)
    T.backward(T.total(T.mul(op(xt), Tensor(r))) if probe_shape else T.scale(op(xt), float(r)))
    assert np.all(rel_err(xt.grad, central_diff(f, x)) < 1e-6)


@pytest.mark.parametrize("name", ["add", "sub", "mul", "scale_add", "plain_add"])
def test_binary_gradients(name, rng):
    ops = {
        "add": lambda a, b: T.add(a, b),
        "sub": lambda a, b: T.sub(a, b),
        "mul": lambda a, b: T.mul(a, b),
        "scale_add": lambda a, b: T.scale_add([a, b, a]),
        "plain_add": lambda a, b: T.plain_add([a, b]),
    }
    op = ops[name]
    a, b = away_from_zero(rng, (4, 3)), away_from_zero(rng, (4, 3))
    r = rng.normal(size=(4, 3))
    at, bt = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    T.backward(T.total(T.mul(op(at, bt), Tensor(r))))
    for arr, t in ((a, at), (b, bt)):
        num = central_diff(lambda: float(np.sum(op(Tensor(a), Tensor(b)).data * r)), arr)
        assert np.all(rel_err(t.grad, num) < 1e-6)


@pytest.mark.parametrize("batched", [False, True])
def test_conv_gradients(batched, rng):
    shape = (2, 2, 5, 6) if batched else (2, 5, 6)
    x = rng.uniform(-2, 2, size=shape)
    k = rng.uniform(-2, 2, size=(3, 2, 3, 3))
    bias = rng.uniform(-2, 2, size=3)
    mask = np.array([[1, 1, 1], [1, 0, 0], [0, 1, 0]], dtype=bool)
    out_shape = (2, 3, 5, 6) if batched else (3, 5, 6)
    r = rng.normal(size=out_shape)

    def f():
        return float(np.sum(T.conv2d(Tensor(x), Tensor(k), mask, (0, 1), Tensor(bias)).data * r))

    xt, kt, bt = (Tensor(v, requires_grad=True) for v in (x, k, bias))
    T.backward(T.total(T.mul(T.conv2d(xt, kt, mask, (0, 1), bt), Tensor(r))))
    for arr, t in ((x, xt), (k, kt), (bias, bt)):
        assert np.all(rel_err(t.grad, central_diff(f, arr)) < 1e-6)
    # masked taps never receive gradient
    assert np.all(kt.grad[:, :, ~mask] == 0.0)


def test_determinism(rng):
    x = rng.normal(size=(2, 3, 9, 9))
    k = rng.normal(size=(4, 3, 3, 3))
    outs = [T.conv2d(Tensor(x), Tensor(k)).data.tobytes() for _ in range(3)]
    assert len(set(outs)) == 1
