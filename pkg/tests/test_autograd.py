import threading

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fitcls import autograd as ag
from fitcls.errors import DimensionError, InputError, NumericError
from gradcheck_util import check_op

PRIMITIVE_TOL = 1e-6
CASES = range(20)


def _normal(rng, *shape, scale=1.0):
    return rng.standard_normal(shape) * scale


def _away_from_zero(rng, *shape):
    x = rng.uniform(0.1, 2.0, shape)
    return x * rng.choice([-1.0, 1.0], shape)


def _distinct(rng, *shape):
    # values at least 0.01 apart, so max ties never flip under a 1e-6 nudge
    return rng.permutation(int(np.prod(shape))).reshape(shape) * 0.01 + rng.uniform(-1e-3, 1e-3, shape)


def _xent(reduction):
    def build(rng):
        targets = rng.integers(0, 5, (2, 3))
        targets[0, 1] = 1
        return (lambda z: ag.softmax_cross_entropy(z, targets, ignore_index=1, reduction=reduction),
                [_normal(rng, 2, 3, 5)])
    return build


def _dropout(rng):
    seed = int(rng.integers(1 << 30))
    return lambda x: ag.dropout(x, 0.3, np.random.default_rng(seed), True), [_normal(rng, 4, 5)]


def _batch_norm(training):
    def build(rng):
        mean, var = rng.standard_normal(4), rng.uniform(0.5, 2.0, 4)

        def op(x, g, b):
            return ag.batch_norm(x, g, b, mean.copy(), var.copy(), training)
        return op, [_normal(rng, 6, 4, scale=2.0) + 1.0, rng.uniform(0.5, 1.5, 4), _normal(rng, 4)]
    return build


def _time_mask(rng):
    mask = (rng.random((3, 5)) < 0.7).astype(float)
    mask[:, 0] = 1.0
    return mask


PRIMITIVES = {
    "add": lambda r: (ag.add, [_normal(r, 3, 4), _normal(r, 4)]),
    "sub": lambda r: (ag.sub, [_normal(r, 3, 4), _normal(r, 3, 1)]),
    "mul": lambda r: (ag.mul, [_normal(r, 2, 3, 4), _normal(r, 3, 4)]),
    "matmul": lambda r: (ag.matmul, [_normal(r, 3, 5), _normal(r, 5, 2)]),
    "transpose": lambda r: (ag.transpose, [_normal(r, 3, 5)]),
    "reshape": lambda r: (lambda x: ag.reshape(x, (3, 4)), [_normal(r, 2, 6)]),
    "concat": lambda r: (lambda a, b: ag.concat([a, b], axis=-1), [_normal(r, 2, 3), _normal(r, 2, 4)]),
    "stack": lambda r: (lambda a, b: ag.stack([a, b], axis=1), [_normal(r, 2, 3), _normal(r, 2, 3)]),
    "slice": lambda r: (lambda x: ag.slice_(x, (slice(1, 4), 2)), [_normal(r, 5, 4)]),
    "sigmoid": lambda r: (ag.sigmoid, [_normal(r, 3, 4, scale=3.0)]),
    "tanh": lambda r: (ag.tanh, [_normal(r, 3, 4, scale=2.0)]),
    "relu": lambda r: (ag.relu, [_away_from_zero(r, 3, 4)]),
    "sum": lambda r: (ag.sum_, [_normal(r, 3, 4)]),
    "where": lambda r: ((lambda m: lambda a, b: ag.where(m, a, b))(r.random((3, 4)) < 0.5),
                        [_normal(r, 3, 4), _normal(r, 3, 4)]),
    "embedding_lookup": lambda r: ((lambda idx: lambda t: ag.embedding_lookup(t, idx))(r.integers(0, 6, (2, 4))),
                                   [_normal(r, 6, 3)]),
    "softmax_cross_entropy_mean": _xent("mean"),
    "softmax_cross_entropy_sum": _xent("sum"),
    "mean_over_time": lambda r: ((lambda m: lambda x: ag.mean_over_time(x, m))(_time_mask(r)), [_normal(r, 3, 5, 2)]),
    "max_over_time": lambda r: ((lambda m: lambda x: ag.max_over_time(x, m))(_time_mask(r)), [_distinct(r, 3, 5, 2)]),
    "batch_norm_train": _batch_norm(True),
    "batch_norm_eval": _batch_norm(False),
    "dropout": _dropout,
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradient_matches_central_differences(name):
    worst = 0.0
    for seed in CASES:
        op, arrays = PRIMITIVES[name](np.random.default_rng(seed))
        worst = max(worst, check_op(op, arrays, seed))
    assert worst < PRIMITIVE_TOL, f"{name}: relative error {worst:.2e}"


def test_gradient_accumulates_over_shared_inputs():
    x = ag.Tensor([1.0, 2.0, 3.0], requires_grad=True)
    y = ag.add(ag.mul(x, x), x)
    ag.backward(ag.add(ag.sum_(y), ag.sum_(ag.slice_(x, slice(1, 3)))))
    np.testing.assert_allclose(x.grad, 2 * x.data + 1 + np.array([0, 1, 1]))


def test_backward_rejects_non_scalar_and_foreign_tensors():
    x = ag.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(DimensionError):
        ag.backward(ag.mul(x, 2.0))
    ag.current_tape().clear()
    with pytest.raises(InputError):
        ag.backward(ag.Tensor(1.0))


def test_tape_is_cleared_after_backward():
    x = ag.Tensor(np.ones(3), requires_grad=True)
    ag.backward(ag.sum_(ag.mul(x, x)))
    assert len(ag.current_tape()) == 0


def test_no_grad_records_nothing():
    x = ag.Tensor(np.ones(3), requires_grad=True)
    with ag.no_grad():
        y = ag.mul(x, x)
    assert not y.requires_grad and len(ag.current_tape()) == 0


def test_non_finite_output_raises():
    with pytest.raises(NumericError), np.errstate(over="ignore"):
        ag.mul(ag.Tensor([1e308]), ag.Tensor([1e308]))


def test_shape_errors():
    with pytest.raises(DimensionError):
        ag.matmul(ag.Tensor(np.ones((2, 3))), ag.Tensor(np.ones((2, 3))))
    with pytest.raises(DimensionError):
        ag.add(ag.Tensor(np.ones((2, 3))), ag.Tensor(np.ones((4,))))
    with pytest.raises(DimensionError):
        ag.softmax_cross_entropy(ag.Tensor(np.ones((2, 3))), [0, 5])


def test_tapes_are_thread_local():
    errors = []

    def worker(seed):
        try:
            x = ag.Tensor(np.full(4, float(seed)), requires_grad=True)
            for _ in range(50):
                ag.backward(ag.sum_(ag.mul(x, x)))
                assert np.allclose(x.grad, 2 * seed * (_ + 1))
        except Exception as exc:  # pragma: no cover - reported below
            errors.append(exc)

    threads = [threading.Thread(target=worker, args=(s,)) for s in range(1, 5)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors


def test_dropout_statistics_and_identity():
    x = ag.Tensor(np.ones((200, 500)))
    y = ag.dropout(x, 0.3, np.random.default_rng(0), training=True).data
    assert abs((y == 0).mean() - 0.3) < 0.01
    assert abs(y.mean() - 1.0) < 0.02
    assert set(np.unique(y)) == {0.0, 1.0 / 0.7}
    assert ag.dropout(x, 0.3, None, training=False) is x
    assert ag.dropout(x, 0.0, None, training=True) is x
    with pytest.raises(InputError):
        ag.dropout(x, 1.0, None)


def test_batch_norm_running_statistics():
    x = np.random.default_rng(0).standard_normal((8, 3)) * 2 + 5
    mean, var = np.zeros(3), np.ones(3)
    out = ag.batch_norm(ag.Tensor(x), ag.Tensor(np.ones(3)), ag.Tensor(np.zeros(3)), mean, var, True).data
    np.testing.assert_allclose(out.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(mean, 0.1 * x.mean(axis=0))
    np.testing.assert_allclose(var, 0.9 + 0.1 * x.var(axis=0, ddof=1))


def test_clip_grad_norm():
    a, b = ag.Tensor(np.zeros(2), requires_grad=True), ag.Tensor(np.zeros(1), requires_grad=True)
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert ag.clip_grad_norm([a, b], 5.0) == 5.0
    np.testing.assert_array_equal(a.grad, [3.0, 0.0])
    assert ag.clip_grad_norm([a, b], 1.0) == 5.0
    np.testing.assert_allclose(np.sqrt((a.grad ** 2).sum() + (b.grad ** 2).sum()), 1.0)


def test_adam_first_steps_by_hand():
    p = ag.Tensor([1.0, -2.0], requires_grad=True)
    opt = ag.Adam([p])
    p.grad = np.array([0.5, -1.0])
    opt.step(0.1)
    g1 = np.array([0.5, -1.0])
    after_one = np.array([1.0, -2.0]) - 0.1 * g1 / (np.abs(g1) + 1e-8)
    # the first bias-corrected step is lr * g / (|g| + eps)
    np.testing.assert_allclose(p.data, after_one, rtol=1e-15)
    p.grad = np.array([-0.5, 2.0])
    opt.step(0.1)
    m = 0.9 * (0.1 * np.array([0.5, -1.0])) + 0.1 * np.array([-0.5, 2.0])
    v = 0.999 * (0.001 * np.array([0.25, 1.0])) + 0.001 * np.array([0.25, 4.0])
    step = 0.1 * (m / (1 - 0.9 ** 2)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    np.testing.assert_allclose(p.data, after_one - step, rtol=1e-14)


def test_adam_skips_frozen_parameters_and_keeps_their_clock():
    p, q = ag.Tensor([1.0], requires_grad=True), ag.Tensor([1.0], requires_grad=False)
    opt = ag.Adam([p, q])
    for _ in range(3):
        p.grad = np.array([1.0])
        opt.step(0.01)
    assert q.data[0] == 1.0 and id(q) not in opt.state
    assert opt.state[id(p)][0] == 3


def test_sgd_with_per_parameter_rates():
    p, q = ag.Tensor([1.0], requires_grad=True), ag.Tensor([1.0], requires_grad=True)
    p.grad, q.grad = np.array([1.0]), np.array([1.0])
    ag.SGD([p, q]).step({id(p): 0.5, id(q): 0.25})
    assert p.data[0] == 0.5 and q.data[0] == 0.75


def test_optimizer_requires_gradients():
    p = ag.Tensor([1.0], requires_grad=True)
    with pytest.raises(InputError):
        ag.Adam([p]).step(0.1)


@given(st.lists(st.floats(-50, 50, allow_nan=False), min_size=1, max_size=10))
def test_log_softmax_normalizes(values):
    z = np.array(values)
    assert np.exp(ag.log_softmax(z)).sum() == pytest.approx(1.0, abs=1e-12)
    assert ag.softmax(z).sum() == pytest.approx(1.0, abs=1e-12)
