import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blackboard_rl import tensor as T
from blackboard_rl.nn import MLP
from blackboard_rl.optim import SGD, Adam, clip_grad_norm, make_optimizer
from blackboard_rl.tensor import DetachedError, MissingGradError, ShapeError, Tensor

from gradcheck import check_op, max_violation, numeric_grad

N_SHAPES = 20


def _shape(rng, rank=None):
    rank = rng.integers(1, 4) if rank is None else rank
    return tuple(int(d) for d in rng.integers(1, 5, size=rank))


def _away_from_zero(rng, shape, lo=0.2):
    x = rng.uniform(lo, 2.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _softmax64(x):
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def _case(name, rng):
    """(op, float64 reference, inputs, differentiated input indices)."""
    s = _shape(rng)
    if name == "add":
        return T.add, np.add, [rng.normal(size=s), rng.normal(size=s)], None
    if name == "sub":
        return T.sub, np.subtract, [rng.normal(size=s), rng.normal(size=s)], None
    if name == "mul":
        return T.mul, np.multiply, [rng.normal(size=s), rng.normal(size=s)], None
    if name == "div":
        return T.div, np.divide, [rng.normal(size=s), _away_from_zero(rng, s, 0.5)], None
    if name == "scale":
        c = float(rng.normal())
        return (lambda a: T.scale(a, c)), (lambda a: a * np.float64(np.float32(c))), [rng.normal(size=s)], None
    if name == "neg":
        return T.neg, np.negative, [rng.normal(size=s)], None
    if name == "broadcast_add":
        b, n = int(rng.integers(1, 5)), int(rng.integers(2, 6))
        return T.add, np.add, [rng.normal(size=(b, 1)), rng.normal(size=(b, n))], None
    if name == "broadcast_mul":
        b, n = int(rng.integers(1, 5)), int(rng.integers(2, 6))
        return T.mul, np.multiply, [rng.normal(size=(b, n)), rng.normal(size=(b, 1))], None
    if name == "scalar_mul":
        return T.mul, np.multiply, [rng.normal(size=s), np.asarray(rng.normal())], None
    if name == "matmul":
        m, k, n = (int(v) for v in rng.integers(1, 5, size=3))
        return T.matmul, np.matmul, [rng.normal(size=(m, k)), rng.normal(size=(k, n))], None
    if name == "linear":
        m, k, n = (int(v) for v in rng.integers(1, 5, size=3))
        return (
            T.linear,
            lambda x, w, b: x @ w + b,
            [rng.normal(size=(m, k)), rng.normal(size=(k, n)), rng.normal(size=(n,))],
            None,
        )
    if name == "relu":
        return T.relu, lambda a: np.maximum(a, 0.0), [_away_from_zero(rng, s, 0.05)], None
    if name == "tanh":
        return T.tanh, np.tanh, [rng.normal(size=s)], None
    if name == "exp":
        return T.exp, np.exp, [rng.normal(size=s)], None
    if name == "log":
        return T.log, np.log, [rng.uniform(0.3, 3.0, size=s)], None
    if name == "square":
        return T.square, np.square, [rng.normal(size=s)], None
    if name == "softmax":
        return T.softmax, _softmax64, [rng.normal(size=s)], None
    if name == "log_softmax":
        return T.log_softmax, lambda a: np.log(_softmax64(a)), [rng.normal(size=s)], None
    if name == "gather":
        idx = rng.integers(0, s[-1], size=s[:-1]).astype(np.float64)

        def ref(a, i):
            return np.take_along_axis(a, i.astype(np.int64)[..., None], axis=-1)[..., 0]

        return T.gather, ref, [rng.normal(size=s), idx], [0]
    if name == "concat":
        axis = int(rng.integers(0, len(s)))
        s2 = list(s)
        s2[axis] = int(rng.integers(1, 4))
        return (
            lambda a, b: T.concat([a, b], axis=axis),
            lambda a, b: np.concatenate([a, b], axis=axis),
            [rng.normal(size=s), rng.normal(size=s2)],
            None,
        )
    if name == "stack":
        return (lambda a, b: T.stack([a, b], axis=0)), (lambda a, b: np.stack([a, b])), [
            rng.normal(size=s), rng.normal(size=s)], None
    if name == "getitem":
        i = int(rng.integers(0, s[0]))
        return (lambda a: T.getitem(a, slice(i, None))), (lambda a: a[i:]), [rng.normal(size=s)], None
    if name == "reshape":
        return (lambda a: a.reshape(-1)), (lambda a: a.reshape(-1)), [rng.normal(size=s)], None
    if name == "sum":
        axis = None if rng.random() < 0.3 else int(rng.integers(0, len(s)))
        return (lambda a: T.sum(a, axis=axis)), (lambda a: np.sum(a, axis=axis)), [rng.normal(size=s)], None
    if name == "mean":
        axis = None if rng.random() < 0.3 else int(rng.integers(0, len(s)))
        return (lambda a: T.mean(a, axis=axis)), (lambda a: np.mean(a, axis=axis)), [rng.normal(size=s)], None
    if name == "mse_loss":
        return T.mse_loss, lambda a, b: np.mean((a - b) ** 2), [rng.normal(size=s), rng.normal(size=s)], None
    if name == "cross_entropy":
        n, c = int(rng.integers(1, 6)), int(rng.integers(2, 6))
        target = rng.integers(0, c, size=n).astype(np.float64)

        def ref(logits, tgt):
            p = _softmax64(logits)
            return -np.mean(np.log(p[np.arange(n), tgt.astype(np.int64)]))

        return T.cross_entropy, ref, [rng.normal(size=(n, c)), target], [0]
    raise KeyError(name)


OPS = [
    "add", "sub", "mul", "div", "scale", "neg", "broadcast_add", "broadcast_mul", "scalar_mul",
    "matmul", "linear", "relu", "tanh", "exp", "log", "square", "softmax", "log_softmax",
    "gather", "concat", "stack", "getitem", "reshape", "sum", "mean", "mse_loss", "cross_entropy",
]


@pytest.mark.parametrize("name", OPS)
def test_primitive_gradients_match_finite_differences(name):
    for seed in range(N_SHAPES):
        rng = np.random.default_rng([seed, OPS.index(name)])
        op, ref, arrays, wrt = _case(name, rng)
        worst = check_op(op, ref, arrays, wrt=wrt, rng=seed)
        assert worst <= 1.0, f"{name} seed {seed}: tolerance ratio {worst:.3f}"


def test_mlp_gradient_check():
    rng = np.random.default_rng(0)
    net = MLP([5, 8, 3], activation="tanh", rng=1)
    x = rng.normal(size=(4, 5))
    w = rng.normal(size=(4, 3))
    loss = T.sum(net(Tensor(x)) * Tensor(w))
    T.backward(loss)
    params = net.parameters()
    arrays = [p.data.astype(np.float64) for p in params]

    def f(*ps):
        w1, b1, w2, b2 = ps
        return float(np.sum((np.tanh(x.astype(np.float32).astype(np.float64) @ w1 + b1) @ w2 + b2) * w))

    for i, p in enumerate(params):
        num = numeric_grad(f, [a.copy() for a in arrays], i)
        assert max_violation(p.grad.data, num) <= 1.0


def test_known_values():
    np.testing.assert_array_equal(T.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[1, 0], [0, 1]])).data, [[1, 2], [3, 4]])
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    assert T.cross_entropy(Tensor([[0.0, 0.0]]), [0]).item() == pytest.approx(math.log(2), abs=1e-6)


def test_backward_examples():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    T.backward(T.sum(x))
    np.testing.assert_array_equal(x.grad.data, [1, 1, 1])
    y = Tensor([2.0], requires_grad=True)
    T.backward(T.mse_loss(y, 0.0))
    np.testing.assert_allclose(y.grad.data, [4.0])


def test_gradients_accumulate_until_zero_grad():
    x = Tensor([1.0, -2.0], requires_grad=True)
    T.backward(T.sum(T.square(x)))
    single = x.grad.data.copy()
    T.backward(T.sum(T.square(x)))
    np.testing.assert_allclose(x.grad.data, 2 * single)
    T.zero_grad([x])
    assert x.grad is None
    T.backward(T.sum(T.square(x)))
    np.testing.assert_array_equal(x.grad.data, single)


def test_zero_grad_on_fresh_params_is_noop():
    p = Tensor([1.0], requires_grad=True)
    T.zero_grad([p])
    assert p.grad is None


def test_backward_errors():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        T.backward(x * 2.0)
    with pytest.raises(DetachedError):
        T.backward(T.sum(Tensor([1.0])))
    loss = T.sum(x * 2.0)
    T.backward(loss)
    with pytest.raises(DetachedError):
        T.backward(loss)


def test_shape_errors_name_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(3, 2\)"):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_index_errors_report_offending_index():
    with pytest.raises(IndexError, match="5"):
        T.gather(Tensor(np.zeros((2, 3))), [0, 5])
    with pytest.raises(IndexError, match="-1"):
        T.cross_entropy(Tensor(np.zeros((2, 3))), [-1, 0])


def test_grad_mode():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    with T.no_grad():
        out = T.matmul(a, a)
        with T.no_grad():
            inner = T.tanh(a)
        still = a * 2.0
    assert not out.requires_grad and not inner.requires_grad and not still.requires_grad
    with pytest.raises(DetachedError):
        T.backward(T.sum(out))
    assert T.is_grad_enabled()
    with T.grad_mode(False):
        assert not T.is_grad_enabled()
    assert T.is_grad_enabled()


def test_sgd_examples():
    p = Tensor([1.0], requires_grad=True)
    p.grad = Tensor([1.0])
    SGD([p], lr=0.1).step()
    assert p.data[0] == pytest.approx(0.9)
    q = Tensor([1.0, 2.0], requires_grad=True)
    q.grad = Tensor([5.0, -3.0])
    SGD([q], lr=0.0).step()
    np.testing.assert_array_equal(q.data, [1.0, 2.0])


def test_adam_first_step():
    p = Tensor([1.0], requires_grad=True)
    p.grad = Tensor([1.0])
    opt = Adam([p], lr=1e-3, betas=(0.9, 0.999), eps=1e-8)
    opt.step()
    # bias-corrected m/sqrt(v) equals g/|g| on the first step
    assert 1.0 - p.data[0] == pytest.approx(1e-3, rel=1e-4)
    assert opt.step_count == 1


def test_optimizer_requires_grads():
    p = Tensor([1.0], requires_grad=True)
    for kind in ("sgd", "adam"):
        with pytest.raises(MissingGradError):
            make_optimizer(kind, [p], 0.1).step()


def test_clip_grad_norm():
    p = Tensor([3.0, 4.0], requires_grad=True)
    p.grad = Tensor([3.0, 4.0])
    assert clip_grad_norm([p], 1.0) == pytest.approx(5.0)
    assert np.linalg.norm(p.grad.data) == pytest.approx(1.0, rel=1e-4)


def test_closed_tape_tensors_act_as_constants():
    w = Tensor([2.0], requires_grad=True)
    h = w * 3.0
    T.backward(T.sum(h))
    w.grad = None
    loss = T.sum(h * w)
    T.backward(loss)
    np.testing.assert_allclose(w.grad.data, [6.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=1, max_size=8), st.integers(1, 4))
def test_softmax_rows_sum_to_one_and_ce_nonnegative(values, rows):
    x = np.tile(np.asarray(values, dtype=np.float32), (rows, 1))
    p = T.softmax(Tensor(x)).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)
    ce = T.cross_entropy(Tensor(x), np.zeros(rows), reduction="none").data
    assert (ce >= 0).all()


def test_repeat_runs_bit_identical():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 5)).astype(np.float32)

    def run():
        net = MLP([5, 6, 2], rng=7)
        out = T.log_softmax(net(Tensor(x)))
        T.backward(T.sum(out * out))
        return out.data, [p.grad.data for p in net.parameters()]

    a, ga = run()
    b, gb = run()
    np.testing.assert_array_equal(a, b)
    for u, v in zip(ga, gb):
        np.testing.assert_array_equal(u, v)
