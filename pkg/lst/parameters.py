from collections import OrderedDict
from typing import Iterator

import numpy as np

from lst.errors import CheckpointError, ContractError
from lst.tensor import DTYPE, Tensor


class ParameterStore:
    """
    Flat, ordered, name -> Tensor store for every trainable parameter of a model.

    Names are dotted paths (e.g. "global.layers.0.attn.wq"). Insertion order is the
    checkpoint order.
    """

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError as e:
            raise ContractError(f"unknown parameter {name!r}") from e

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise ContractError(f"parameter {name!r} registered twice")
        tensor = Tensor(np.array(value, dtype=DTYPE), requires_grad=True, name=name)
        self._params[name] = tensor
        return tensor

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def num_parameters(self, prefix: str = "") -> int:
        return sum(t.size for name, t in self._params.items() if name.startswith(prefix))

    def zero_grad(self) -> None:
        for tensor in self._params.values():
            tensor.zero_grad()

    def grads(self) -> dict[str, np.ndarray]:
        return {
            name: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for name, t in self._params.items()
        }

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        """
        Overwrite parameter values in place.

        Raises:
            CheckpointError: On missing names (strict) or shape mismatches.
        """
        missing = [name for name in self._params if name not in arrays]
        if strict and missing:
            raise CheckpointError(f"missing tensors: {', '.join(missing[:5])}")
        for name, value in arrays.items():
            if name not in self._params:
                if strict:
                    raise CheckpointError(f"unexpected tensor {name!r}")
                continue
            target = self._params[name]
            if tuple(value.shape) != target.shape:
                raise CheckpointError(
                    f"shape mismatch for {name!r}: {tuple(value.shape)} vs {target.shape}"
                )
            target.data = np.array(value, dtype=DTYPE)

    def snapshot(self) -> "ParameterStore":
        """Independent copy of the current values (no gradients)."""
        copy = ParameterStore()
        for name, tensor in self._params.items():
            copy.add(name, tensor.data)
        return copy
