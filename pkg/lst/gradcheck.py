"""Central finite-difference oracle for autodiff gradients."""

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from lst.tensor import Tensor, no_grad


@dataclass(frozen=True)
class GradCheckResult:
    name: str
    max_relative_error: float
    checked: int


def relative_error(analytic: float, numeric: float, floor: float = 1e-4) -> float:
    return abs(analytic - numeric) / max(abs(analytic) + abs(numeric), floor)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    *,
    h: float = 1e-5,
    max_entries: int | None = None,
    floor: float = 1e-4,
    rng: np.random.Generator | None = None,
) -> list[GradCheckResult]:
    """
    Compare autodiff gradients against central differences.

    `loss_fn` must rebuild the graph from the current tensor values on every call. When
    `max_entries` is set, each tensor is checked at its largest-gradient entry plus random
    entries up to that count.

    Returns:
        list[GradCheckResult]: One result per tensor.
    """
    rng = rng or np.random.default_rng(0)
    for tensor in tensors:
        tensor.zero_grad()
    loss_fn().backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    results = []
    for tensor, grad in zip(tensors, analytic):
        flat = tensor.data.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            top = int(np.argmax(np.abs(grad.reshape(-1))))
            others = rng.choice(flat.size, size=max_entries - 1, replace=False)
            entries = np.unique(np.concatenate([[top], others]))
        worst = 0.0
        for i in entries:
            original = flat[i]
            with no_grad():
                flat[i] = original + h
                plus = loss_fn().item()
                flat[i] = original - h
                minus = loss_fn().item()
            flat[i] = original
            numeric = (plus - minus) / (2 * h)
            worst = max(worst, relative_error(float(grad.reshape(-1)[i]), numeric, floor))
        results.append(GradCheckResult(tensor.name or "tensor", worst, len(entries)))
    return results
