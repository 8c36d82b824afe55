"""Finite-difference oracles for gradient verification."""
import numpy as np

from .tensor import Tensor, backward


def finite_diff_grad(f, x, h=1e-5):
    """Central differences of scalar ``f`` at ``x`` (array or Tensor), one coordinate at a time."""
    if h <= 0:
        raise ValueError("finite_diff_grad: step must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(np.asarray(_value(f(base.copy()))))
        flat[i] = orig - h
        down = float(np.asarray(_value(f(base.copy()))))
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def _value(y):
    return y.data if isinstance(y, Tensor) else y


def relative_error(a, b):
    """``|a - b| / max(|a|, |b|)`` with Euclidean norms; 0 when both vanish."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(fn, inputs, h=1e-5):
    """Compare autodiff against central differences for every input array.

    ``fn`` maps a list of Tensors to a scalar Tensor. Returns the list of
    relative errors, one per input.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    backward(fn(leaves), params=leaves)
    errors = []
    for k, leaf in enumerate(leaves):
        def f_k(v, k=k):
            args = [Tensor(a) for a in arrays]
            args[k] = Tensor(v)
            return fn(args)

        errors.append(relative_error(leaf.grad, finite_diff_grad(f_k, arrays[k], h)))
    return errors
