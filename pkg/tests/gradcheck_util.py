"""Central-difference gradient checking shared by the test modules."""
import numpy as np

from fitcls import autograd as ag


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Normwise relative error ||a - b|| / max(||a||, ||b||), 0 when both vanish."""
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0.0 else float(np.linalg.norm(a - b) / scale)


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """d f / d x by central differences; ``f`` reads ``x`` (modified in place) and returns a float."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def check_op(build, arrays, seed: int, h: float = 1e-6) -> float:
    """Max relative error over all inputs of ``build(*tensors) -> Tensor``.

    The output is reduced to a scalar with a fixed random projection.
    """
    rng = np.random.default_rng(10_000 + seed)
    tensors = [ag.Tensor(a, requires_grad=True) for a in arrays]
    out = build(*tensors)
    proj = rng.standard_normal(out.shape)
    loss = ag.sum_(ag.mul(out, proj))
    ag.backward(loss)

    def value():
        with ag.no_grad():
            return float((build(*tensors).data * proj).sum())

    worst = 0.0
    for t in tensors:
        num = numeric_grad(value, t.data, h)
        worst = max(worst, rel_error(t.grad, num))
    return worst


def check_params(loss_fn, params, h: float = 1e-6) -> float:
    """Max relative error of the gradients of a scalar ``loss_fn()`` w.r.t. ``params``."""
    for p in params:
        p.grad = None
    ag.backward(loss_fn())
    analytic = [p.grad.copy() for p in params]

    def value():
        with ag.no_grad():
            return loss_fn().item()

    return max(rel_error(a, numeric_grad(value, p.data, h)) for a, p in zip(analytic, params))
