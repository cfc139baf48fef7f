from typing import Callable, Dict, Sequence

import numpy as np

from autodiff.tensor import Tape, Tensor, backward


def numerical_gradient(fn: Callable[[], Tensor], tensor: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of the scalar ``fn()`` with respect to ``tensor.values``."""
    grad = np.zeros_like(tensor.values)
    flat = tensor.values.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        plus = fn().item()
        flat[i] = original - h
        minus = fn().item()
        flat[i] = original
        out[i] = (plus - minus) / (2.0 * h)
    return grad


def analytic_gradient(fn: Callable[[], Tensor], tensors: Sequence[Tensor]) -> Dict[int, np.ndarray]:
    for t in tensors:
        t.zero_grad()
    with Tape():
        loss = fn()
        backward(loss)
    return {id(t): (t.grad if t.grad is not None else np.zeros_like(t.values)) for t in tensors}


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
    return float(np.linalg.norm(analytic - numeric) / scale)


def check_gradients(fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-5) -> float:
    """
    Compare tape gradients with central differences for every tensor in ``tensors``.

    ``fn`` must rebuild the scalar output from the current tensor values each
    time it is called. Returns the worst relative error.
    """
    analytic = analytic_gradient(fn, tensors)
    worst = 0.0
    for t in tensors:
        numeric = numerical_gradient(fn, t, h)
        worst = max(worst, relative_error(analytic[id(t)], numeric))
    return worst
