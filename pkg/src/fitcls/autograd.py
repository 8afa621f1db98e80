"""A small tape-based reverse-mode autodiff engine over float64 numpy arrays.

Every primitive computes its forward value eagerly. When any input requires a
gradient (and recording is enabled) the primitive appends one record to the
current thread's :class:`Tape`; :func:`backward` walks that record list in
exact reverse and clears it.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, InputError, NumericError


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: _Record | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class _Record:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered log of executed primitives; usable as a context manager."""

    def __init__(self):
        self.records: list[_Record] = []

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        for rec in self.records:
            rec.out._node = None
        self.records.clear()

    def __enter__(self) -> "Tape":
        _local().tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local().tapes.pop()


class _State(threading.local):
    def __init__(self):
        self.tapes = [Tape()]
        self.grad_enabled = True


_state = _State()


def _local() -> _State:
    return _state


def current_tape() -> Tape:
    return _state.tapes[-1]


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class _Indexed:
    """A gradient contribution that only touches ``index`` of the input."""

    __slots__ = ("index", "value")

    def __init__(self, index, value):
        self.index = index
        self.value = value


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, arr: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op}: non-finite value in output")
    return arr


def _emit(op: str, value: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = _check_finite(op, value)
    out.grad = None
    out.name = ""
    out._node = None
    out.requires_grad = _state.grad_enabled and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        rec = _Record(out, tuple(inputs), backward)
        out._node = rec
        current_tape().records.append(rec)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# primitives

def add(a, b) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _emit("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def matmul(a, b) -> Tensor:
    """2-d matrix product (m, k) @ (k, n)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _emit("matmul", a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got shape {a.shape}")
    return _emit("transpose", a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        value = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _emit("reshape", value, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    try:
        value = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def backward(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _emit("concat", value, ts, backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    try:
        value = np.stack([t.data for t in ts], axis=axis)
    except ValueError:
        raise DimensionError(f"stack: incompatible shapes {[t.shape for t in ts]}") from None

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _emit("stack", value, ts, backward)


def slice_(a, index) -> Tensor:
    """Basic numpy indexing (ints and slices) as a differentiable op."""
    a = _as_tensor(a)
    try:
        value = a.data[index]
    except IndexError as exc:
        raise DimensionError(f"slice: {exc} for shape {a.shape}") from None
    return _emit("slice", np.array(value), (a,), lambda g: (_Indexed(index, g),))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    t = np.tanh(a.data)
    return _emit("tanh", t, (a,), lambda g: (g * (1.0 - t * t),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _emit("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sum_(a) -> Tensor:
    a = _as_tensor(a)
    return _emit("sum", np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape),))


def where(mask, a, b) -> Tensor:
    """``mask * a + (1 - mask) * b`` for a constant 0/1 ``mask``."""
    a, b = _as_tensor(a), _as_tensor(b)
    m = np.asarray(mask, dtype=np.float64)
    value = m * a.data + (1.0 - m) * b.data
    if value.shape != np.broadcast_shapes(a.shape, b.shape):
        raise DimensionError(f"where: mask shape {m.shape} does not fit {a.shape}/{b.shape}")
    return _emit("where", value, (a, b),
                 lambda g: (_unbroadcast(g * m, a.shape), _unbroadcast(g * (1.0 - m), b.shape)))


def embedding_lookup(table, indices) -> Tensor:
    """Rows of a (V, d) table at integer ``indices`` of any shape."""
    table = _as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    if table.data.ndim != 2:
        raise DimensionError(f"embedding_lookup: table must be 2-d, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise DimensionError(f"embedding_lookup: index out of range for table of {table.shape[0]} rows")

    def backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (grad,)

    return _emit("embedding_lookup", table.data[idx], (table,), backward)


def log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(x: np.ndarray) -> np.ndarray:
    shifted = np.exp(x - x.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, targets, ignore_index: int | None = None,
                          reduction: str = "mean") -> Tensor:
    """Cross-entropy of (..., C) logits against integer targets of shape (...).

    Targets equal to ``ignore_index`` contribute nothing. ``reduction`` is
    "mean" (over counted targets) or "sum".
    """
    logits = _as_tensor(logits)
    tgt = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim < 1 or tgt.shape != logits.shape[:-1]:
        raise DimensionError(f"softmax_cross_entropy: logits {logits.shape} vs targets {tgt.shape}")
    if reduction not in ("mean", "sum"):
        raise InputError(f"unknown reduction {reduction!r}")
    C = logits.shape[-1]
    flat = logits.data.reshape(-1, C)
    t = tgt.reshape(-1)
    valid = np.ones(t.shape, dtype=bool) if ignore_index is None else t != ignore_index
    if np.any((t[valid] < 0) | (t[valid] >= C)):
        raise DimensionError(f"softmax_cross_entropy: target out of range for {C} classes")
    n = int(valid.sum())
    if n == 0:
        raise InputError("softmax_cross_entropy: no targets to score")
    logp = log_softmax(flat)
    rows = np.nonzero(valid)[0]
    total = -logp[rows, t[rows]].sum()
    scale = 1.0 / n if reduction == "mean" else 1.0

    def backward(g):
        grad = np.exp(logp)
        grad[rows, t[rows]] -= 1.0
        grad[~valid] = 0.0
        return ((grad * (g * scale)).reshape(logits.shape),)

    return _emit("softmax_cross_entropy", np.array(total * scale), (logits,), backward)


def _time_mask(x: Tensor, mask) -> np.ndarray:
    if x.data.ndim != 3:
        raise DimensionError(f"expected (batch, time, features), got {x.shape}")
    if mask is None:
        return np.ones(x.shape[:2])
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != x.shape[:2]:
        raise DimensionError(f"mask shape {m.shape} does not match {x.shape[:2]}")
    if np.any(m.sum(axis=1) == 0):
        raise InputError("every sequence needs at least one unmasked step")
    return m


def mean_over_time(x, mask=None) -> Tensor:
    """Mean over axis 1 of a (B, T, H) tensor, counting only unmasked steps."""
    x = _as_tensor(x)
    m = _time_mask(x, mask)
    counts = m.sum(axis=1, keepdims=True)
    value = (x.data * m[:, :, None]).sum(axis=1) / counts
    return _emit("mean_over_time", value, (x,),
                 lambda g: ((g / counts)[:, None, :] * m[:, :, None],))


def max_over_time(x, mask=None) -> Tensor:
    """Max over axis 1 of a (B, T, H) tensor, ignoring masked steps."""
    x = _as_tensor(x)
    m = _time_mask(x, mask)
    masked = np.where(m[:, :, None] > 0, x.data, -np.inf)
    arg = masked.argmax(axis=1)
    value = np.take_along_axis(x.data, arg[:, None, :], axis=1)[:, 0, :]

    def backward(g):
        grad = np.zeros_like(x.data)
        np.put_along_axis(grad, arg[:, None, :], g[:, None, :], axis=1)
        return (grad,)

    return _emit("max_over_time", value, (x,), backward)


def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray, training: bool,
               momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-feature normalization of a (N, F) batch.

    Training mode normalizes with batch statistics and updates the running
    buffers in place; evaluation mode uses the running buffers.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.data.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"batch_norm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    n = x.shape[0]
    if training:
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * (var * n / (n - 1) if n > 1 else var)
    else:
        mu, var = running_mean.copy(), running_var.copy()
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    g_, b_ = gamma.data, beta.data

    def backward(g):
        dxhat = g * g_
        if training:
            dx = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            dx = dxhat * inv
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _emit("batch_norm", xhat * g_ + b_, (x, gamma, beta), backward)


def dropout(x, p: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    """Inverted dropout: zero with probability ``p`` and scale survivors by 1/(1-p)."""
    x = _as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise InputError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return _emit("dropout", x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# backward pass

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    rec = loss._node
    tape = current_tape()
    if rec is None or not tape.records or rec not in tape.records:
        raise InputError("backward: tensor was not produced on the current tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    # buffers allocated here may be updated in place; others may alias a
    # gradient handed to several inputs
    owned: set[int] = set()
    leaves: dict[int, Tensor] = {}
    try:
        for r in reversed(tape.records):
            g = grads.pop(id(r.out), None)
            if g is None:
                continue
            for inp, gi in zip(r.inputs, r.backward(g)):
                if not inp.requires_grad or gi is None:
                    continue
                key = id(inp)
                acc = grads.get(key)
                if isinstance(gi, _Indexed):
                    if acc is None:
                        acc = np.zeros(inp.shape)
                    elif key not in owned:
                        acc = acc.copy()
                    acc[gi.index] += gi.value
                    owned.add(key)
                elif acc is None:
                    acc = gi
                else:
                    acc = acc + gi
                    owned.add(key)
                grads[key] = acc
                if inp._node is None:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            _check_finite("backward", g)
            if leaf.grad is not None:
                leaf.grad = leaf.grad + g
            else:
                leaf.grad = g if key in owned else np.array(g, dtype=np.float64)
    finally:
        tape.clear()


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Rescale grads in place so their global L2 norm is at most ``max_norm``; return the pre-clip norm."""
    params = [p for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float((p.grad * p.grad).sum()) for p in params)))
    if not np.isfinite(total):
        raise NumericError("gradient norm is not finite")
    if total > max_norm > 0:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad = p.grad * scale
    return total


# ---------------------------------------------------------------------------
# optimizers

def _trainable(params: Iterable[Tensor]) -> list[Tensor]:
    out = []
    for p in params:
        if not p.requires_grad:
            continue
        if p.grad is None:
            raise InputError(f"trainable parameter {p.name or p!r} has no gradient")
        out.append(p)
    return out


def _lr_for(lr, p: Tensor) -> float:
    return lr.get(id(p), 0.0) if isinstance(lr, dict) else float(lr)


def sgd_step(params: Iterable[Tensor], lr) -> None:
    """Plain gradient descent. ``lr`` is a float or a dict keyed by ``id(param)``."""
    for p in _trainable(params):
        p.data -= _lr_for(lr, p) * p.grad


class SGD:
    def __init__(self, params: Sequence[Tensor], weight_decay: float = 0.0):
        self.params = list(params)
        self.weight_decay = weight_decay

    def step(self, lr) -> None:
        for p in _trainable(self.params):
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            p.data -= _lr_for(lr, p) * g

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class Adam:
    """Adam with per-parameter step counters.

    Counters advance only when a parameter is trainable, so a layer that is
    unfrozen late starts with properly bias-corrected moments.
    """

    def __init__(self, params: Sequence[Tensor], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.state: dict[int, list] = {}

    def step(self, lr) -> None:
        for p in _trainable(self.params):
            adam_step(p, _lr_for(lr, p), self.state.setdefault(id(p), [0, None, None]),
                      self.beta1, self.beta2, self.eps, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def adam_step(p: Tensor, lr: float, state: list, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """One Adam update of ``p``; ``state`` is a mutable [t, m, v] triple."""
    g = p.grad + weight_decay * p.data if weight_decay else p.grad
    t, m, v = state
    if m is None:
        m, v = np.zeros_like(p.data), np.zeros_like(p.data)
    t += 1
    m = beta1 * m + (1.0 - beta1) * g
    v = beta2 * v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
    state[:] = [t, m, v]
