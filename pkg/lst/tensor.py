"""
Dense 64-bit tensors with reverse-mode automatic differentiation.

Every differentiable operation is a `Function` subclass. `Function.apply` runs the
forward pass on raw arrays and, when gradients are being recorded, links the output
tensor back to the function instance. `backward()` linearizes that graph into a
`ComputationTape` (topological order) and replays it in reverse, visiting every op once.
"""

import threading
from contextlib import contextmanager
from typing import Any, Iterator, Sequence

import numpy as np

from lst.errors import ContractError

DTYPE = np.float64

_grad_mode = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_mode, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording on the current thread."""
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


class Function:
    """
    Base class for differentiable operations.

    Subclasses implement `forward` over NumPy arrays and `backward`, which maps the
    gradient w.r.t. the output to one gradient (or None) per input tensor.
    """

    def __init__(self, *inputs: "Tensor"):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no forward pass")

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        raise NotImplementedError(f"{type(self).__name__} has no backward pass")

    @classmethod
    def apply(cls, *inputs: "Tensor", **kwargs: Any) -> "Tensor":
        fn = cls(*inputs)
        out = fn.forward(*(t.data for t in inputs), **kwargs)
        requires_grad = is_grad_enabled() and any(t.requires_grad for t in inputs)
        if not requires_grad:
            return Tensor(out)
        return Tensor(out, requires_grad=True, _creator=fn)

    @staticmethod
    def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
        """Sum out the dimensions NumPy broadcasting added to reach `grad.shape`."""
        if grad.shape == shape:
            return grad
        while grad.ndim > len(shape):
            grad = grad.sum(axis=0)
        for axis, size in enumerate(shape):
            if size == 1 and grad.shape[axis] != 1:
                grad = grad.sum(axis=axis, keepdims=True)
        return grad


class Tensor:
    """A float64 array with an optional gradient and a link to the op that made it."""

    __array_priority__ = 1000

    def __init__(
        self,
        data: np.ndarray | Sequence | float | int,
        *,
        requires_grad: bool = False,
        name: str | None = None,
        _creator: Function | None = None,
    ):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.name = name
        self.grad: np.ndarray | None = None
        self._creator = _creator

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def creator(self) -> Function | None:
        return self._creator

    @property
    def is_leaf(self) -> bool:
        return self._creator is None

    @property
    def T(self) -> "Tensor":
        from lst import ops

        return ops.transpose(self)

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    ##############
    # Operators  #
    ##############
    def __add__(self, other: "Tensor | float") -> "Tensor":
        from lst import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other: "Tensor | float") -> "Tensor":
        from lst import ops

        return ops.sub(self, other)

    def __rsub__(self, other: "Tensor | float") -> "Tensor":
        from lst import ops

        return ops.sub(ops.as_tensor(other), self)

    def __neg__(self) -> "Tensor":
        from lst import ops

        return ops.scale(self, -1.0)

    def __mul__(self, other: "Tensor | float") -> "Tensor":
        from lst import ops

        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other: float) -> "Tensor":
        from lst import ops

        return ops.scale(self, 1.0 / float(other))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        from lst import ops

        return ops.matmul(self, other)


class ComputationTape:
    """
    Ordered record of the ops that produced a tensor.

    `ops` is in topological order: every op's inputs are produced by earlier ops (or are
    leaves). `backward` replays it in reverse exactly once per op.
    """

    def __init__(self, ops: list[tuple[Function, Tensor]]):
        self.ops = ops

    def __len__(self) -> int:
        return len(self.ops)

    @classmethod
    def record(cls, output: Tensor) -> "ComputationTape":
        """
        Linearize the graph reachable from `output`.

        Returns:
            ComputationTape: (function, output tensor) pairs in topological order.
        """
        order: list[tuple[Function, Tensor]] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            tensor, expanded = stack.pop()
            fn = tensor.creator
            if fn is None:
                continue
            if expanded:
                order.append((fn, tensor))
                continue
            if id(fn) in visited:
                continue
            visited.add(id(fn))
            stack.append((tensor, True))
            for parent in fn.inputs:
                if parent.creator is not None and id(parent.creator) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def backward(self, output: Tensor, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(output): seed}
        tensors: dict[int, Tensor] = {id(output): output}
        for fn, out in reversed(self.ops):
            grad = grads.pop(id(out), None)
            if out.requires_grad:
                out.grad = grad if out.grad is None or grad is None else out.grad + grad
            if grad is None:
                continue
            for parent, parent_grad in zip(fn.inputs, fn.backward(grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                tensors[key] = parent
                if key in grads:
                    grads[key] = grads[key] + parent_grad
                else:
                    grads[key] = parent_grad
        # Leaves left over
        for key, grad in grads.items():
            leaf = tensors[key]
            if leaf.creator is None and leaf.requires_grad:
                leaf.grad = grad.copy() if leaf.grad is None else leaf.grad + grad


def backward(loss: Tensor) -> None:
    """
    Populate `.grad` for every requires_grad tensor reachable from `loss`.

    Raises:
        ContractError: If `loss` is not a scalar or was not produced on a tape.
    """
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward() called on a tensor that is not on a tape")
    if loss.creator is None:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    tape = ComputationTape.record(loss)
    tape.backward(loss, np.ones_like(loss.data))
