import threading
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes or axes are incompatible"""
    pass


class TapeError(RuntimeError):
    """Raised when a backward pass cannot find the recorded graph"""
    pass


_state = threading.local()


class TapeNode:
    __slots__ = ("tape", "index", "output", "inputs", "backward_fn")

    def __init__(self, tape, index, output, inputs, backward_fn):
        self.tape = tape
        self.index = index
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """
    Ordered record of differentiable operations for one thread.

    Operations append themselves while the tape is active (inside a ``with``
    block), so the record list is always in topological order.
    """

    def __init__(self):
        self.records: List[TapeNode] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = []
            _state.stack = stack
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _state.stack.pop()
        return False

    def __len__(self) -> int:
        return len(self.records)

    @staticmethod
    def current() -> Optional["Tape"]:
        stack = getattr(_state, "stack", None)
        if not stack:
            return None
        return stack[-1]

    def record(self, output: "Tensor", inputs: Sequence["Tensor"],
               backward_fn: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]) -> None:
        node = TapeNode(self, len(self.records), output, tuple(inputs), backward_fn)
        output.tape_node = node
        self.records.append(node)

    def backward(self, loss: "Tensor") -> None:
        node = loss.tape_node
        if node is None or node.tape is not self:
            raise TapeError("loss was not recorded on this tape")

        loss.grad = np.ones_like(loss.values)
        for record in reversed(self.records[:node.index + 1]):
            out_grad = record.output.grad
            if out_grad is None:
                continue
            grads = record.backward_fn(out_grad)
            for tensor, grad in zip(record.inputs, grads):
                if grad is None or not tensor.requires_grad:
                    continue
                if grad.shape != tensor.values.shape:
                    grad = np.reshape(grad, tensor.values.shape)
                if tensor.grad is None:
                    tensor.grad = grad
                else:
                    tensor.grad = tensor.grad + grad


class Tensor:
    """Dense float64 array that can take part in a differentiation tape"""

    __slots__ = ("values", "requires_grad", "grad", "tape_node")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.tape_node: Optional[TapeNode] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.values

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; the implementations live in autodiff.ops
    def __add__(self, other):
        from autodiff import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from autodiff import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from autodiff import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from autodiff import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from autodiff import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from autodiff import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from autodiff import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from autodiff import ops
        return ops.div(other, self)

    def __neg__(self):
        from autodiff import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from autodiff import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from autodiff import ops
        return ops.slice_(self, index)

    def reshape(self, *shape):
        from autodiff import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def backward(loss: Tensor) -> None:
    """
    Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    Args:
        loss: scalar tensor produced on an active tape

    Raises:
        ShapeError: if the loss is not a scalar
        TapeError: if the loss was not recorded
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape_node is None:
        raise TapeError("loss is not on an active tape; run the forward pass inside `with Tape():`")
    loss.tape_node.tape.backward(loss)
