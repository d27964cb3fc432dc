"""
Differentiable operations over `Tensor`.

Each op is a `Function` subclass with an explicit backward rule plus a lowercase
functional wrapper. Attention is built from `matmul` and `masked_softmax` with an
explicit boolean mask; masked entries get exactly zero probability and zero gradient.
"""

from typing import Sequence

import numpy as np

from lst.errors import ConfigError, DimensionError, EmptyLossError, VocabularyIndexError
from lst.tensor import DTYPE, Function, Tensor


def as_tensor(value: Tensor | float | np.ndarray) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


###############
# Elementwise #
###############
class Add(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.unbroadcast(grad, self.shapes[0]), self.unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.unbroadcast(grad, self.shapes[0]), self.unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.a, self.b = a, b
        return a * b

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return (
            self.unbroadcast(grad * self.b, self.a.shape),
            self.unbroadcast(grad * self.a, self.b.shape),
        )


class Scale(Function):
    def forward(self, a: np.ndarray, *, factor: float) -> np.ndarray:
        self.factor = factor
        return a * factor

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad * self.factor,)


class SiLU(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.x = x
        self.sig = 0.5 * (1.0 + np.tanh(0.5 * x))
        return x * self.sig

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        s = self.sig
        return (grad * s * (1.0 + self.x * (1.0 - s)),)


class GELU(Function):
    """Tanh approximation."""

    _k = np.sqrt(2.0 / np.pi)

    def forward(self, x: np.ndarray) -> np.ndarray:
        self.x = x
        self.t = np.tanh(self._k * (x + 0.044715 * x**3))
        return 0.5 * x * (1.0 + self.t)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        x, t = self.x, self.t
        dt = (1.0 - t**2) * self._k * (1.0 + 3 * 0.044715 * x**2)
        return (grad * (0.5 * (1.0 + t) + 0.5 * x * dt),)


#############
# Reduction #
#############
class Sum(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.shape = x.shape
        return np.asarray(x.sum(), dtype=DTYPE)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (np.broadcast_to(grad, self.shape).copy(),)


class Mean(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.shape = x.shape
        return np.asarray(x.mean(), dtype=DTYPE)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (np.broadcast_to(grad / np.prod(self.shape), self.shape).copy(),)


#################
# Linear algebra #
#################
class MatMul(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise DimensionError("matmul inner dimensions disagree", a.shape, b.shape)
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ga = np.matmul(grad, np.swapaxes(self.b, -1, -2))
        gb = np.matmul(np.swapaxes(self.a, -1, -2), grad)
        return self.unbroadcast(ga, self.a.shape), self.unbroadcast(gb, self.b.shape)


class Transpose(Function):
    def forward(self, x: np.ndarray, *, axes: tuple[int, ...] | None = None) -> np.ndarray:
        if axes is None:
            axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
        self.inverse = tuple(np.argsort(axes))
        return np.transpose(x, axes)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (np.transpose(grad, self.inverse),)


class Reshape(Function):
    def forward(self, x: np.ndarray, *, shape: tuple[int, ...]) -> np.ndarray:
        self.shape = x.shape
        return x.reshape(shape)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad.reshape(self.shape),)


############
# Indexing #
############
class TakeRows(Function):
    def forward(self, x: np.ndarray, *, index: np.ndarray) -> np.ndarray:
        self.shape = x.shape
        self.index = index
        return x[index]

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        out = np.zeros(self.shape, dtype=DTYPE)
        np.add.at(out, self.index, grad)
        return (out,)


class Embedding(TakeRows):
    def forward(self, weight: np.ndarray, *, index: np.ndarray) -> np.ndarray:
        if index.size and (index.min() < 0 or index.max() >= weight.shape[0]):
            bad = index[(index < 0) | (index >= weight.shape[0])][0]
            raise VocabularyIndexError(
                f"token id {int(bad)} outside embedding table of size {weight.shape[0]}"
            )
        return super().forward(weight, index=index)


class ConcatRows(Function):
    def forward(self, *xs: np.ndarray) -> np.ndarray:
        self.sizes = [x.shape[0] for x in xs]
        return np.concatenate(xs, axis=0)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, ...]:
        return tuple(np.split(grad, np.cumsum(self.sizes)[:-1], axis=0))


#################
# Normalization #
#################
class RMSNorm(Function):
    def forward(self, x: np.ndarray, *, eps: float) -> np.ndarray:
        self.rms = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
        self.y = x / self.rms
        return self.y

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        y = self.y
        return ((grad - y * np.mean(grad * y, axis=-1, keepdims=True)) / self.rms,)


class LayerNorm(Function):
    def forward(self, x: np.ndarray, *, eps: float) -> np.ndarray:
        centered = x - x.mean(axis=-1, keepdims=True)
        self.std = np.sqrt(np.mean(centered**2, axis=-1, keepdims=True) + eps)
        self.y = centered / self.std
        return self.y

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        y = self.y
        g = grad - grad.mean(axis=-1, keepdims=True) - y * np.mean(grad * y, axis=-1, keepdims=True)
        return (g / self.std,)


#############
# Attention #
#############
class MaskedSoftmax(Function):
    def forward(self, x: np.ndarray, *, mask: np.ndarray) -> np.ndarray:
        allowed = np.broadcast_to(mask, x.shape)
        scores = np.where(allowed, x, -np.inf)
        row_max = scores.max(axis=-1, keepdims=True)
        row_max = np.where(np.isfinite(row_max), row_max, 0.0)
        e = np.where(allowed, np.exp(scores - row_max), 0.0)
        total = e.sum(axis=-1, keepdims=True)
        self.p = np.divide(e, total, out=np.zeros_like(e), where=total > 0)
        return self.p

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        p = self.p
        return (p * (grad - np.sum(grad * p, axis=-1, keepdims=True)),)


class Rotary(Function):
    def forward(self, x: np.ndarray, *, positions: np.ndarray, theta: float) -> np.ndarray:
        d = x.shape[-1]
        if d % 2:
            raise ConfigError(f"rotary embedding needs an even head dimension, got {d}")
        freqs = theta ** (-np.arange(0, d, 2, dtype=DTYPE) / d)
        angles = np.asarray(positions, dtype=DTYPE)[:, None] * freqs[None, :]
        self.cos, self.sin = np.cos(angles), np.sin(angles)
        even, odd = x[..., 0::2], x[..., 1::2]
        out = np.empty_like(x)
        out[..., 0::2] = even * self.cos - odd * self.sin
        out[..., 1::2] = even * self.sin + odd * self.cos
        return out

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        ge, go = grad[..., 0::2], grad[..., 1::2]
        out = np.empty_like(grad)
        out[..., 0::2] = ge * self.cos + go * self.sin
        out[..., 1::2] = -ge * self.sin + go * self.cos
        return (out,)


########
# Loss #
########
class SoftmaxCrossEntropy(Function):
    def forward(self, logits: np.ndarray, *, targets: np.ndarray, ignore_index: int) -> np.ndarray:
        n, v = logits.shape
        if targets.shape != (n,):
            raise DimensionError("targets must have one entry per logits row", logits.shape, targets.shape)
        valid = targets != ignore_index
        bad = valid & ((targets < 0) | (targets >= v))
        if bad.any():
            raise VocabularyIndexError(f"target {int(targets[bad][0])} outside [0, {v})")
        self.count = int(valid.sum())
        if self.count == 0:
            raise EmptyLossError("every target position is ignored")
        self.valid, self.targets = valid, np.where(valid, targets, 0)
        shifted = logits - logits.max(axis=-1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        self.log_p = shifted - log_z
        nll = -self.log_p[np.arange(n), self.targets]
        return np.asarray(nll[valid].sum() / self.count, dtype=DTYPE)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        g = np.exp(self.log_p)
        g[np.arange(g.shape[0]), self.targets] -= 1.0
        g[~self.valid] = 0.0
        return (g * (grad / self.count),)


##########################
# Functional entry points #
##########################
def add(a: Tensor | float, b: Tensor | float) -> Tensor:
    return Add.apply(as_tensor(a), as_tensor(b))


def sub(a: Tensor | float, b: Tensor | float) -> Tensor:
    return Sub.apply(as_tensor(a), as_tensor(b))


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Mul.apply(as_tensor(a), as_tensor(b))


def scale(a: Tensor, factor: float) -> Tensor:
    return Scale.apply(a, factor=float(factor))


def silu(x: Tensor) -> Tensor:
    return SiLU.apply(x)


def gelu(x: Tensor) -> Tensor:
    return GELU.apply(x)


def sum(x: Tensor) -> Tensor:  # noqa: A001
    return Sum.apply(x)


def mean(x: Tensor) -> Tensor:
    return Mean.apply(x)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


def transpose(x: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    return Transpose.apply(x, axes=axes)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return Reshape.apply(x, shape=tuple(shape))


def take_rows(x: Tensor, index: Sequence[int] | np.ndarray) -> Tensor:
    return TakeRows.apply(x, index=np.asarray(index, dtype=np.int64))


def embedding_lookup(weight: Tensor, ids: Sequence[int] | np.ndarray) -> Tensor:
    return Embedding.apply(weight, index=np.asarray(ids, dtype=np.int64))


def concat_rows(xs: Sequence[Tensor]) -> Tensor:
    return ConcatRows.apply(*xs)


def rms_norm(x: Tensor, weight: Tensor | None = None, eps: float = 1e-6) -> Tensor:
    y = RMSNorm.apply(x, eps=eps)
    return y if weight is None else mul(y, weight)


def layer_norm(x: Tensor, weight: Tensor | None = None, eps: float = 1e-6) -> Tensor:
    y = LayerNorm.apply(x, eps=eps)
    return y if weight is None else mul(y, weight)


def masked_softmax(x: Tensor, mask: np.ndarray) -> Tensor:
    return MaskedSoftmax.apply(x, mask=np.asarray(mask, dtype=bool))


def softmax(x: Tensor) -> Tensor:
    return masked_softmax(x, np.ones(x.shape[-1:], dtype=bool))


def rotary_position_embed(x: Tensor, positions: Sequence[int] | np.ndarray, theta: float) -> Tensor:
    return Rotary.apply(x, positions=np.asarray(positions), theta=float(theta))


def softmax_cross_entropy(
    logits: Tensor, targets: Sequence[int] | np.ndarray, ignore_index: int = -100
) -> Tensor:
    return SoftmaxCrossEntropy.apply(
        logits, targets=np.asarray(targets, dtype=np.int64), ignore_index=int(ignore_index)
    )


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax over raw arrays (no tape)."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
