"""Transformer building blocks over `ParameterStore` tensors, plus attention masks."""

from typing import Callable

import numpy as np

from lst import ops
from lst.errors import ConfigError
from lst.parameters import ParameterStore
from lst.tensor import Tensor

#########
# Masks #
#########
def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def window_mask(positions: np.ndarray, window: int) -> np.ndarray:
    """Query t may see key s iff 0 <= pos[t] - pos[s] < window."""
    offset = positions[:, None] - positions[None, :]
    return (offset >= 0) & (offset < window)


def membership_mask(starts: np.ndarray, ends: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """[patch, token]: token position lies inside the patch."""
    return (positions[None, :] >= starts[:, None]) & (positions[None, :] <= ends[:, None])


def visible_units_mask(positions: np.ndarray, unit_ends: np.ndarray) -> np.ndarray:
    """
    [position, 1 + unit]: column 0 (start context) is always visible; unit u is visible
    from position t iff the unit ends at or before t.
    """
    visible = unit_ends[None, :] <= positions[:, None]
    return np.concatenate([np.ones((len(positions), 1), dtype=bool), visible], axis=1)


##################
# Initialization #
##################
def init_normal(rng: np.random.Generator, shape: tuple[int, ...], std: float) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


def norm_fn(kind: str) -> Callable[[Tensor, Tensor], Tensor]:
    match kind:
        case "rms":
            return ops.rms_norm
        case "layer":
            return ops.layer_norm
    raise ConfigError(f"unknown normalization {kind!r}", "model.norm")


def activation_fn(kind: str) -> Callable[[Tensor], Tensor]:
    match kind:
        case "silu":
            return ops.silu
        case "gelu":
            return ops.gelu
    raise ConfigError(f"unknown activation {kind!r}", "model.activation")


##########
# Layers #
##########
class Attention:
    """
    Multi-head attention with an explicit boolean mask; optional RoPE on queries and
    keys. With `context` given it is cross-attention.
    """

    def __init__(
        self,
        params: ParameterStore,
        prefix: str,
        d_model: int,
        n_heads: int,
        rng: np.random.Generator,
        std: float,
        d_context: int | None = None,
    ):
        if d_model % n_heads:
            raise ConfigError(f"dimension {d_model} not divisible by {n_heads} heads", f"{prefix}.n_heads")
        d_context = d_context or d_model
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.wq = params.add(f"{prefix}.wq", init_normal(rng, (d_model, d_model), std))
        self.wk = params.add(f"{prefix}.wk", init_normal(rng, (d_context, d_model), std))
        self.wv = params.add(f"{prefix}.wv", init_normal(rng, (d_context, d_model), std))
        self.wo = params.add(f"{prefix}.wo", init_normal(rng, (d_model, d_model), std))

    def _heads(self, x: Tensor) -> Tensor:
        n = x.shape[0]
        return ops.transpose(ops.reshape(x, (n, self.n_heads, self.d_head)), (1, 0, 2))

    def __call__(
        self,
        x: Tensor,
        mask: np.ndarray,
        *,
        context: Tensor | None = None,
        positions: np.ndarray | None = None,
        context_positions: np.ndarray | None = None,
        theta: float | None = None,
    ) -> Tensor:
        source = x if context is None else context
        q = self._heads(x @ self.wq)
        k = self._heads(source @ self.wk)
        v = self._heads(source @ self.wv)
        if theta is not None:
            q = ops.rotary_position_embed(q, positions, theta)
            k = ops.rotary_position_embed(k, positions if context_positions is None else context_positions, theta)
        scores = ops.scale(q @ ops.transpose(k), 1.0 / np.sqrt(self.d_head))
        out = ops.masked_softmax(scores, mask) @ v
        out = ops.reshape(ops.transpose(out, (1, 0, 2)), (x.shape[0], self.n_heads * self.d_head))
        return out @ self.wo


class FeedForward:
    """Gated feed-forward: act(x W1) * (x W3) W2."""

    def __init__(
        self, params: ParameterStore, prefix: str, d_model: int, hidden: int, rng: np.random.Generator, std: float,
        activation: str = "silu",
    ):
        self.act = activation_fn(activation)
        self.w1 = params.add(f"{prefix}.w1", init_normal(rng, (d_model, hidden), std))
        self.w3 = params.add(f"{prefix}.w3", init_normal(rng, (d_model, hidden), std))
        self.w2 = params.add(f"{prefix}.w2", init_normal(rng, (hidden, d_model), std))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.mul(self.act(x @ self.w1), x @ self.w3) @ self.w2


class Block:
    """Pre-norm self-attention block, optionally with a cross-attention sublayer."""

    def __init__(
        self,
        params: ParameterStore,
        prefix: str,
        d_model: int,
        n_heads: int,
        ffn_mult: int,
        rng: np.random.Generator,
        std: float,
        *,
        norm: str = "rms",
        activation: str = "silu",
        cross: bool = False,
    ):
        self.norm = norm_fn(norm)
        self.attn_norm = params.add(f"{prefix}.attn_norm", np.ones(d_model))
        self.attn = Attention(params, f"{prefix}.attn", d_model, n_heads, rng, std)
        self.cross_norm = params.add(f"{prefix}.cross_norm", np.ones(d_model)) if cross else None
        self.cross = Attention(params, f"{prefix}.cross", d_model, n_heads, rng, std) if cross else None
        self.ffn_norm = params.add(f"{prefix}.ffn_norm", np.ones(d_model))
        self.ffn = FeedForward(params, f"{prefix}.ffn", d_model, ffn_mult * d_model, rng, std, activation)

    def __call__(
        self,
        x: Tensor,
        mask: np.ndarray,
        positions: np.ndarray,
        theta: float,
        *,
        context: Tensor | None = None,
        context_mask: np.ndarray | None = None,
    ) -> Tensor:
        x = x + self.attn(self.norm(x, self.attn_norm), mask, positions=positions, theta=theta)
        if self.cross is not None and context is not None:
            x = x + self.cross(self.norm(x, self.cross_norm), context_mask, context=context)
        return x + self.ffn(self.norm(x, self.ffn_norm))
