"""AdamW with decoupled weight decay, global-norm clipping and the warmup + cosine schedule."""

import math
from dataclasses import dataclass, field

import numpy as np

from lst.errors import TrainingDivergenceError


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": a for k, a in self.m.items()}
        out.update({f"adam.v.{k}": a for k, a in self.v.items()})
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], t: int) -> "AdamState":
        state = cls(t=t)
        for key, value in arrays.items():
            if key.startswith("adam.m."):
                state.m[key[len("adam.m."):]] = value.copy()
            elif key.startswith("adam.v."):
                state.v[key[len("adam.v."):]] = value.copy()
        return state


def warmup_cosine(step: int, lr: float, warmup: int, total: int, min_ratio: float) -> float:
    """Linear warmup to `lr`, then cosine decay to `min_ratio * lr` at `total`."""
    if step < warmup:
        return lr * step / warmup
    if step >= total:
        return lr * min_ratio
    progress = (step - warmup) / max(total - warmup, 1)
    return lr * (min_ratio + (1.0 - min_ratio) * 0.5 * (1.0 + math.cos(math.pi * progress)))


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float, step: int | None = None) -> tuple[dict[str, np.ndarray], float]:
    """
    Scale gradients so their global L2 norm is at most `max_norm`.

    Raises:
        TrainingDivergenceError: If any gradient is not finite.
    """
    norm = global_norm(grads)
    if not math.isfinite(norm):
        bad = next(name for name, g in grads.items() if not np.all(np.isfinite(g)))
        raise TrainingDivergenceError(f"non-finite gradient in {bad}", step)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        grads = {name: g * factor for name, g in grads.items()}
    return grads, norm


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    *,
    betas: tuple[float, float] = (0.9, 0.95),
    eps: float = 1e-8,
    weight_decay: float = 0.1,
) -> dict[str, np.ndarray]:
    """
    One bias-corrected AdamW update. Weight decay is decoupled and applies only to
    tensors with two or more dimensions.

    Returns:
        dict: New parameter arrays (inputs are not modified); `state` is updated in place.
    """
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    updated = {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * state.m.get(name, np.zeros_like(p)) + (1.0 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(p)) + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        new = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay and p.ndim >= 2:
            new = new - lr * weight_decay * p
        updated[name] = new
    return updated
