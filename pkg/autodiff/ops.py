"""
Differentiable operations over Tensor.

Every function computes its forward value with numpy and, when an input
requires gradients and a Tape is active, records a backward rule that maps
the output gradient to one gradient per input (None for constants).

Broadcasting is limited to scalar-tensor pairs; anything else must be made
explicit with ``reshape``/``expand``.
"""

from typing import Callable, Dict, Iterable, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from autodiff.tensor import ShapeError, Tape, Tensor
from config import LOG_EPS

Axis = Union[int, Tuple[int, ...], None]


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def _result(values: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(values, requires_grad=requires)
    if requires:
        tape = Tape.current()
        if tape is not None:
            tape.record(out, inputs, backward_fn)
    return out


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def _norm_axes(axis: Axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (_norm_axis(axis, ndim),)
    return tuple(sorted(_norm_axis(a, ndim) for a in axis))


# ---------------------------------------------------------------- elementwise

def _pair(a, b, name: str):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    if a.shape != b.shape:
        if a.size == 1 and a.ndim <= b.ndim:
            av = av.reshape(())
        elif b.size == 1 and b.ndim <= a.ndim:
            bv = bv.reshape(())
        else:
            raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} are incompatible "
                             f"(only scalar-tensor broadcasting is supported)")
    return a, b, av, bv


def _fit(grad: np.ndarray, tensor: Tensor) -> Optional[np.ndarray]:
    if not tensor.requires_grad:
        return None
    if grad.shape == tensor.shape:
        return grad
    return np.reshape(np.sum(grad), tensor.shape)


def add(a, b) -> Tensor:
    a, b, av, bv = _pair(a, b, "add")

    def backward_fn(g):
        return _fit(g, a), _fit(g, b)

    return _result(av + bv, (a, b), backward_fn)


def sub(a, b) -> Tensor:
    a, b, av, bv = _pair(a, b, "sub")

    def backward_fn(g):
        return _fit(g, a), _fit(-g, b)

    return _result(av - bv, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a, b, av, bv = _pair(a, b, "mul")

    def backward_fn(g):
        return _fit(g * bv, a), _fit(g * av, b)

    return _result(av * bv, (a, b), backward_fn)


def div(a, b) -> Tensor:
    """Elementwise a / b; denominators smaller than LOG_EPS in magnitude are clamped to ±LOG_EPS."""
    a, b, av, bv = _pair(a, b, "div")
    safe = np.where(np.abs(bv) < LOG_EPS, np.where(bv < 0, -LOG_EPS, LOG_EPS), bv)

    def backward_fn(g):
        return _fit(g / safe, a), _fit(-g * av / (safe * safe), b)

    return _result(av / safe, (a, b), backward_fn)


def neg(x) -> Tensor:
    x = as_tensor(x)
    return _result(-x.values, (x,), lambda g: (-g,))


def square(x) -> Tensor:
    x = as_tensor(x)
    xv = x.values
    return _result(xv * xv, (x,), lambda g: (2.0 * xv * g,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.values)
    return _result(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    """Natural log with inputs clamped at LOG_EPS; clamped positions get zero gradient."""
    x = as_tensor(x)
    xv = x.values
    clamped = np.maximum(xv, LOG_EPS)

    def backward_fn(g):
        return (np.where(xv >= LOG_EPS, g / clamped, 0.0),)

    return _result(np.log(clamped), (x,), backward_fn)


def relu(x) -> Tensor:
    x = as_tensor(x)
    xv = x.values
    return _result(np.maximum(xv, 0.0), (x,), lambda g: (g * (xv > 0.0),))


def gelu(x) -> Tensor:
    x = as_tensor(x)
    xv = x.values
    cdf = 0.5 * (1.0 + erf(xv / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * xv * xv) / np.sqrt(2.0 * np.pi)
    return _result(xv * cdf, (x,), lambda g: (g * (cdf + xv * pdf),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    xv = x.values
    pos = xv >= 0
    ez = np.exp(np.where(pos, -xv, xv))
    out = np.where(pos, 1.0 / (1.0 + ez), ez / (1.0 + ez))
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


_ELEMENTWISE: Dict[str, Callable[..., Tensor]] = {
    "add": add, "sub": sub, "mul": mul, "div": div,
    "neg": neg, "square": square, "exp": exp, "log": log,
    "relu": relu, "gelu": gelu, "sigmoid": sigmoid,
}


def elementwise(op: str, *operands) -> Tensor:
    if op not in _ELEMENTWISE:
        raise ValueError(f"Unknown elementwise op: {op}")
    return _ELEMENTWISE[op](*operands)


# ---------------------------------------------------------------- reductions

def _restore(g: np.ndarray, shape: Tuple[int, ...], axes: Tuple[int, ...], keepdims: bool) -> np.ndarray:
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def reduce(x, kind: str, axis: Axis = None, keepdims: bool = False) -> Tensor:
    """
    Reduce along ``axis`` with kind in {sum, mean, max, var}.

    ``var`` is the population variance. ``max`` routes the whole gradient to a
    single position per slice, the lowest index among ties.
    """
    x = as_tensor(x)
    xv = x.values
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1

    if kind == "sum":
        out = np.sum(xv, axis=axes, keepdims=keepdims)
        return _result(out, (x,), lambda g: (_restore(g, x.shape, axes, keepdims).copy(),))

    if kind == "mean":
        out = np.mean(xv, axis=axes, keepdims=keepdims)
        return _result(out, (x,), lambda g: (_restore(g, x.shape, axes, keepdims) / count,))

    if kind == "var":
        centered = xv - np.mean(xv, axis=axes, keepdims=True)
        out = np.mean(centered * centered, axis=axes, keepdims=keepdims)
        return _result(out, (x,),
                       lambda g: (_restore(g, x.shape, axes, keepdims) * 2.0 * centered / count,))

    if kind == "max":
        if len(axes) == x.ndim:
            flat_index = int(np.argmax(xv))
            out = np.max(xv, axis=axes, keepdims=keepdims)

            def backward_fn(g):
                grad = np.zeros(xv.size)
                grad[flat_index] = np.sum(g)
                return (grad.reshape(x.shape),)

            return _result(out, (x,), backward_fn)
        if len(axes) != 1:
            raise ShapeError("max reduces over a single axis or over all axes")
        ax = axes[0]
        index = np.expand_dims(np.argmax(xv, axis=ax), ax)
        out = np.take_along_axis(xv, index, axis=ax)
        if not keepdims:
            out = np.squeeze(out, axis=ax)

        def backward_fn(g):
            grad = np.zeros_like(xv)
            g_keep = g if keepdims else np.expand_dims(g, ax)
            np.put_along_axis(grad, index, g_keep, axis=ax)
            return (grad,)

        return _result(out, (x,), backward_fn)

    raise ValueError(f"Unknown reduction: {kind}")


def sum_(x, axis: Axis = None, keepdims: bool = False) -> Tensor:
    return reduce(x, "sum", axis, keepdims)


def mean(x, axis: Axis = None, keepdims: bool = False) -> Tensor:
    return reduce(x, "mean", axis, keepdims)


def max_(x, axis: Axis = None, keepdims: bool = False) -> Tensor:
    return reduce(x, "max", axis, keepdims)


def var(x, axis: Axis = None, keepdims: bool = False) -> Tensor:
    return reduce(x, "var", axis, keepdims)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    ax = _norm_axis(axis, x.ndim)
    shifted = x.values - np.max(x.values, axis=ax, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=ax, keepdims=True)

    def backward_fn(g):
        return (out * (g - np.sum(g * out, axis=ax, keepdims=True)),)

    return _result(out, (x,), backward_fn)


# ---------------------------------------------------------------- shape ops

def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = np.reshape(x.values, tuple(shape))
    except ValueError as e:
        raise ShapeError(f"cannot reshape {x.shape} into {tuple(shape)}") from e
    return _result(out, (x,), lambda g: (np.reshape(g, x.shape),))


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    if sorted(_norm_axis(a, x.ndim) for a in axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose axes {axes} do not permute rank {x.ndim}")
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(x.values, axes), (x,), lambda g: (np.transpose(g, inverse),))


def slice_(x, index) -> Tensor:
    x = as_tensor(x)
    out = x.values[index]

    def backward_fn(g):
        grad = np.zeros_like(x.values)
        np.add.at(grad, index, g)
        return (grad,)

    return _result(np.array(out, dtype=np.float64), (x,), backward_fn)


def take(x, indices, axis: int = 0) -> Tensor:
    """Gather entries of ``x`` along ``axis``; repeated indices accumulate gradient."""
    x = as_tensor(x)
    ax = _norm_axis(axis, x.ndim)
    indices = np.asarray(indices, dtype=np.int64)
    out = np.take(x.values, indices, axis=ax)

    def backward_fn(g):
        grad = np.zeros_like(x.values)
        np.add.at(np.moveaxis(grad, ax, 0), indices, np.moveaxis(g, ax, 0))
        return (grad,)

    return _result(out, (x,), backward_fn)


def expand(x, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast of ``x`` to ``shape`` (new leading axes or size-1 axes)."""
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.values, shape).copy()
    except ValueError as e:
        raise ShapeError(f"cannot expand {x.shape} to {shape}") from e
    lead = len(shape) - x.ndim

    def backward_fn(g):
        if lead:
            g = np.sum(g, axis=tuple(range(lead)))
        axes = tuple(i for i, (s, t) in enumerate(zip(x.shape, g.shape)) if s == 1 and t != 1)
        if axes:
            g = np.sum(g, axis=axes, keepdims=True)
        return (g,)

    return _result(out, (x,), backward_fn)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    ax = _norm_axis(axis, tensors[0].ndim)
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
                s != r for i, (s, r) in enumerate(zip(t.shape, tensors[0].shape)) if i != ax):
            raise ShapeError(f"concat: shapes {tensors[0].shape} and {t.shape} differ off axis {ax}")
    out = np.concatenate([t.values for t in tensors], axis=ax)
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward_fn(g):
        return tuple(np.split(g, splits, axis=ax))

    return _result(out, tensors, backward_fn)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """
    Matrix product. ``a`` is (..., m, k); ``b`` is (k, n) or carries the same
    leading batch axes as ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or not (
            b.ndim == 2 or (b.ndim == a.ndim and a.shape[:-2] == b.shape[:-2])):
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.values, b.values

    def backward_fn(g):
        ga = g @ np.swapaxes(bv, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bv.ndim == 2:
                gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(av, -1, -2) @ g
        return ga, gb

    return _result(av @ bv, (a, b), backward_fn)


def layer_norm(x, gamma=None, beta=None, axis: int = -1, eps: float = 1e-6) -> Tensor:
    """
    Normalize ``x`` to zero mean and unit variance along ``axis``; optional
    ``gamma``/``beta`` vectors of length ``x.shape[axis]`` scale and shift.
    """
    x = as_tensor(x)
    ax = _norm_axis(axis, x.ndim)
    n = x.shape[ax]
    bshape = [1] * x.ndim
    bshape[ax] = n
    other = tuple(i for i in range(x.ndim) if i != ax)

    centered = x.values - np.mean(x.values, axis=ax, keepdims=True)
    inv = 1.0 / np.sqrt(np.mean(centered * centered, axis=ax, keepdims=True) + eps)
    xhat = centered * inv
    out = xhat
    inputs = [x]
    if gamma is not None:
        gamma = as_tensor(gamma)
        if gamma.shape != (n,):
            raise ShapeError(f"layer_norm gamma shape {gamma.shape} != ({n},)")
        out = out * gamma.values.reshape(bshape)
        inputs.append(gamma)
    if beta is not None:
        beta = as_tensor(beta)
        if beta.shape != (n,):
            raise ShapeError(f"layer_norm beta shape {beta.shape} != ({n},)")
        out = out + beta.values.reshape(bshape)
        inputs.append(beta)

    def backward_fn(g):
        gx = g * gamma.values.reshape(bshape) if gamma is not None else g
        dx = inv * (gx - np.mean(gx, axis=ax, keepdims=True)
                    - xhat * np.mean(gx * xhat, axis=ax, keepdims=True))
        grads = [dx]
        if gamma is not None:
            grads.append(np.sum(g * xhat, axis=other))
        if beta is not None:
            grads.append(np.sum(g, axis=other))
        return tuple(grads)

    return _result(out, inputs, backward_fn)


# ---------------------------------------------------------------- convolution

def _batched(x: Tensor, name: str) -> Tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.values[None], True
    if x.ndim == 4:
        return x.values, False
    raise ShapeError(f"{name} expects C×H×W or N×C×H×W input, got {x.shape}")


def _im2col(xp: np.ndarray, k: int, stride: int) -> Tuple[np.ndarray, int, int]:
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = windows.shape[:4]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols, ho, wo


def _col2im(cols: np.ndarray, out_shape: Tuple[int, int, int, int], k: int, stride: int) -> np.ndarray:
    # cols: (N, Hpos, Wpos, C, k, k) scattered onto an (N, C, H, W) canvas
    canvas = np.zeros(out_shape)
    hpos, wpos = cols.shape[1], cols.shape[2]
    for i in range(k):
        for j in range(k):
            canvas[:, :, i:i + stride * hpos:stride, j:j + stride * wpos:stride] += \
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return canvas


def conv2d(x, kernel, stride: int = 1, padding: int = 0, bias=None) -> Tensor:
    """
    Cross-correlation of x (C_in×H×W or N×C_in×H×W) with kernel
    (C_out×C_in×k×k); output spatial size floor((H+2p−k)/stride)+1.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    xv, squeeze = _batched(x, "conv2d")
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ShapeError(f"conv2d kernel must be C_out×C_in×k×k, got {kernel.shape}")
    c_out, c_in, k, _ = kernel.shape
    n, c, h, w = xv.shape
    if c != c_in:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ShapeError(f"kernel {k}×{k} larger than padded input {h + 2 * padding}×{w + 2 * padding}")

    xp = np.pad(xv, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xv
    cols, ho, wo = _im2col(xp, k, stride)
    kmat = kernel.values.reshape(c_out, -1)
    out = (cols @ kmat.T).reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    inputs = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.values.reshape(1, c_out, 1, 1)
        inputs.append(bias)
    if squeeze:
        out = out[0]

    def backward_fn(g):
        g4 = g[None] if squeeze else g
        g2 = g4.transpose(0, 2, 3, 1).reshape(-1, c_out)
        grads = []
        if x.requires_grad:
            gcols = (g2 @ kmat).reshape(n, ho, wo, c, k, k)
            gxp = _col2im(gcols, xp.shape, k, stride)
            gx = gxp[:, :, padding:padding + h, padding:padding + w]
            grads.append(gx[0] if squeeze else gx)
        else:
            grads.append(None)
        grads.append((g2.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None)
        if bias is not None:
            grads.append(np.sum(g4, axis=(0, 2, 3)))
        return tuple(grads)

    return _result(np.ascontiguousarray(out), inputs, backward_fn)


def conv_transpose2d(x, kernel, stride: int = 1, bias=None) -> Tensor:
    """
    Adjoint of conv2d without padding. x has kernel.shape[0] channels, the
    output kernel.shape[1]; output spatial size stride·(H−1)+k.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    xv, squeeze = _batched(x, "conv_transpose2d")
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ShapeError(f"transposed conv kernel must be C_in×C_out×k×k, got {kernel.shape}")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    c_in, c_out, k, _ = kernel.shape
    n, c, h, w = xv.shape
    if c != c_in:
        raise ShapeError(f"transposed conv channel mismatch: input {x.shape}, kernel {kernel.shape}")

    ho, wo = stride * (h - 1) + k, stride * (w - 1) + k
    xm = xv.transpose(0, 2, 3, 1).reshape(-1, c_in)
    kmat = kernel.values.reshape(c_in, -1)
    out = _col2im((xm @ kmat).reshape(n, h, w, c_out, k, k), (n, c_out, ho, wo), k, stride)
    inputs = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.values.reshape(1, c_out, 1, 1)
        inputs.append(bias)
    if squeeze:
        out = out[0]

    def backward_fn(g):
        g4 = g[None] if squeeze else g
        gcols, _, _ = _im2col(g4, k, stride)
        grads = []
        if x.requires_grad:
            gx = (gcols @ kmat.T).reshape(n, h, w, c_in).transpose(0, 3, 1, 2)
            grads.append(gx[0] if squeeze else gx)
        else:
            grads.append(None)
        grads.append((xm.T @ gcols).reshape(kernel.shape) if kernel.requires_grad else None)
        if bias is not None:
            grads.append(np.sum(g4, axis=(0, 2, 3)))
        return tuple(grads)

    return _result(out, inputs, backward_fn)
