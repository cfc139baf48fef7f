import logging
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from autodiff import ops
from autodiff.tensor import ShapeError, Tensor

logger = logging.getLogger(__name__)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) samples redrawn until they fall inside ±2 std"""
    values = rng.normal(0.0, std, size=shape)
    outside = np.abs(values) > 2.0 * std
    while np.any(outside):
        values[outside] = rng.normal(0.0, std, size=int(outside.sum()))
        outside = np.abs(values) > 2.0 * std
    return values


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def parameter(values) -> Tensor:
    return Tensor(np.array(values, dtype=np.float64), requires_grad=True)


class Module:
    """
    Base class for network pieces.

    Tensor attributes with requires_grad are parameters, other Tensor
    attributes are buffers; both are part of the state dict. Child modules
    may sit in attributes, lists or dicts.
    """

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[Tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Tensor, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, Module):
                        yield f"{name}.{key}", item

    def named_tensors(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            else:
                yield from value.named_tensors(full + ".")

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        return ((n, t) for n, t in self.named_tensors() if t.requires_grad)

    def parameters(self) -> List[Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.values.copy() for name, t in self.named_tensors()}

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> Tuple[List[str], List[str]]:
        """
        Copy matching arrays into this module's tensors.

        Returns:
            (missing, unexpected) name lists

        Raises:
            ShapeError: when a named array has the wrong shape
            KeyError: in strict mode when names do not match exactly
        """
        own = dict(self.named_tensors())
        missing = [name for name in own if name not in state]
        unexpected = [name for name in state if name not in own]
        if strict and (missing or unexpected):
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, values in state.items():
            if name not in own:
                continue
            target = own[name]
            if tuple(values.shape) != target.shape:
                raise ShapeError(f"shape conflict for {name}: stored {tuple(values.shape)}, model {target.shape}")
            target.values = np.array(values, dtype=np.float64)
        return missing, unexpected


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, std: float = 0.02):
        self.weight = parameter(trunc_normal(rng, (in_dim, out_dim), std))
        self.bias = parameter(np.zeros(out_dim))

    def forward(self, x: Tensor) -> Tensor:
        out = ops.matmul(x, self.weight)
        return ops.add(out, ops.expand(self.bias, out.shape))


class LayerNorm(Module):
    def __init__(self, dim: int, axis: int = -1):
        self.weight = parameter(np.ones(dim))
        self.bias = parameter(np.zeros(dim))
        self.axis = axis

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.weight, self.bias, axis=self.axis)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, bias: bool = True):
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = parameter(he_normal(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in))
        self.bias = parameter(np.zeros(out_channels)) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, stride=self.stride, padding=self.padding, bias=self.bias)


class ConvTranspose2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator,
                 stride: int = 1):
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = parameter(he_normal(rng, (in_channels, out_channels, kernel_size, kernel_size), fan_in))
        self.bias = parameter(np.zeros(out_channels))
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv_transpose2d(x, self.weight, stride=self.stride, bias=self.bias)


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))


class MultiHeadAttention(Module):
    """
    Scaled dot-product attention with separate query and key/value sources.

    Queries come from ``x_q`` (B×Tq×dim_q), keys and values from ``x_kv``
    (B×Tk×dim_kv). Scores are scaled by 1/sqrt(head dim).
    """

    def __init__(self, dim_q: int, dim_kv: int, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"attention dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = Linear(dim_q, dim, rng)
        self.k_proj = Linear(dim_kv, dim, rng)
        self.v_proj = Linear(dim_kv, dim, rng)
        self.out_proj = Linear(dim, dim_q, rng)
        self.last_weights: Optional[np.ndarray] = None

    def _split(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        x = ops.reshape(x, (b, t, self.heads, self.head_dim))
        x = ops.transpose(x, (0, 2, 1, 3))
        return ops.reshape(x, (b * self.heads, t, self.head_dim))

    def attend(self, x_q: Tensor, x_kv: Tensor) -> Tensor:
        """Attention context before the output projection, B×Tq×dim"""
        if x_q.ndim != 3 or x_kv.ndim != 3 or x_q.shape[0] != x_kv.shape[0]:
            raise ShapeError(f"attention expects batched token matrices, got {x_q.shape} and {x_kv.shape}")
        b, tq, _ = x_q.shape
        q = self._split(self.q_proj(x_q))
        k = self._split(self.k_proj(x_kv))
        v = self._split(self.v_proj(x_kv))
        scores = ops.mul(ops.matmul(q, ops.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(self.head_dim))
        weights = ops.softmax(scores, axis=-1)
        self.last_weights = weights.values.reshape(b, self.heads, tq, -1)
        context = ops.matmul(weights, v)
        context = ops.reshape(context, (b, self.heads, tq, self.head_dim))
        context = ops.transpose(context, (0, 2, 1, 3))
        return ops.reshape(context, (b, tq, self.heads * self.head_dim))

    def forward(self, x_q: Tensor, x_kv: Optional[Tensor] = None) -> Tensor:
        return self.out_proj(self.attend(x_q, x_q if x_kv is None else x_kv))


class TransformerBlock(Module):
    """Pre-norm self-attention block with residual attention and MLP paths"""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, dim, dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, dim * mlp_ratio, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = ops.add(x, self.attn(self.norm1(x)))
        return ops.add(x, self.mlp(self.norm2(x)))


def patchify(x: Tensor, patch_size: int) -> Tensor:
    """Split N×C×H×W maps into N×T×(C·p·p) row-major patch tokens"""
    n, c, h, w = x.shape
    if h % patch_size or w % patch_size:
        raise ShapeError(f"spatial size {h}×{w} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = ops.reshape(x, (n, c, gh, patch_size, gw, patch_size))
    x = ops.transpose(x, (0, 2, 4, 1, 3, 5))
    return ops.reshape(x, (n, gh * gw, c * patch_size * patch_size))
