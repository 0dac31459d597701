"""Transformer encoder building blocks on top of :mod:`fineformer.tensor`."""

from __future__ import annotations

from typing import Iterator

import numpy as np
from scipy.stats import truncnorm

from . import tensor as T
from .tensor import Tensor

INIT_STD = 0.02
# std of a standard normal truncated to [-2, 2]; divides it back out so the
# truncated draw has the requested std.
_TRUNC2_STD = float(truncnorm.std(-2.0, 2.0))


def truncated_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Draws with standard deviation ``std``, cut at two (pre-scaling) sigmas."""
    z = rng.standard_normal(shape)
    bad = np.abs(z) > 2.0
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > 2.0
    return z * (std / _TRUNC2_STD)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class Module:
    """Minimal container that discovers parameters from attributes.

    Trainable parameters are tensors with ``requires_grad=True``; tensors
    stored with ``requires_grad=False`` are frozen and only show up when
    ``include_frozen`` is set. Discovery order is attribute assignment
    order, which makes parameter names and checkpoint layout deterministic.
    """

    def named_parameters(self, prefix: str = "", include_frozen: bool = False) -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                if value.requires_grad or include_frozen:
                    yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".", include_frozen)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.", include_frozen)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def frozen_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.named_parameters(include_frozen=True) if not p.requires_grad]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters(include_frozen=True)}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters(include_frozen=True))
        missing = own.keys() - state.keys()
        unexpected = state.keys() - own.keys()
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise T.ShapeError(f"{name}: expected {p.shape}, got {value.shape}")
            p.data[...] = value

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        self.weight = parameter(truncated_normal(rng, (in_dim, out_dim)))
        self.bias = parameter(np.zeros(out_dim)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return T.add_broadcast(y, self.bias) if self.bias is not None else y


class Embedding(Module):
    def __init__(self, num: int, dim: int, rng: np.random.Generator):
        self.table = parameter(truncated_normal(rng, (num, dim)))

    def forward(self, ids) -> Tensor:
        return T.take(self.table, ids)


def layer_norm(x: Tensor, gain: Tensor, offset: Tensor, eps: float = 1e-12) -> Tensor:
    if x.shape[-1] < 2:
        raise T.ShapeError(f"layer_norm needs at least 2 features, got {x.shape[-1]}")
    return T.add_broadcast(T.mul_broadcast(T.standardize(x, eps), gain), offset)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-12):
        if dim < 2:
            raise T.ShapeError(f"layer_norm needs at least 2 features, got {dim}")
        self.gain = parameter(np.ones(dim))
        self.offset = parameter(np.zeros(dim))
        self._eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.offset, self._eps)


class MultiHeadSelfAttention(Module):
    """Scaled dot-product self-attention over ``(..., seq, hidden)`` inputs.

    Query/key/value projections carry no bias: a key bias adds the same
    score to every key of a row and cancels in the softmax, so its gradient
    is identically zero.

    The most recent attention probabilities are kept in ``last_attention``
    with shape ``(batch, heads, seq, seq)`` for diagnostics.
    """

    def __init__(self, hidden: int, heads: int, rng: np.random.Generator):
        if hidden % heads:
            raise ValueError(f"hidden size {hidden} is not divisible by {heads} heads")
        self.query = Linear(hidden, hidden, rng, bias=False)
        self.key = Linear(hidden, hidden, rng, bias=False)
        self.value = Linear(hidden, hidden, rng, bias=False)
        self.output = Linear(hidden, hidden, rng)
        self._heads = heads
        self._head_dim = hidden // heads
        self.last_attention: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        b, s, _ = x.shape
        return T.transpose(T.reshape(x, (b, s, self._heads, self._head_dim)), (0, 2, 1, 3))

    def forward(self, x: Tensor) -> Tensor:
        unbatched = x.ndim == 2
        if unbatched:
            x = T.reshape(x, (1,) + x.shape)
        b, s, h = x.shape
        q = self._split(self.query(x))
        k = self._split(self.key(x))
        v = self._split(self.value(x))
        scores = T.mul_scalar(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(self._head_dim))
        probs = T.softmax(scores)
        self.last_attention = probs.data
        context = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (b, s, h))
        out = self.output(context)
        return T.reshape(out, (s, h)) if unbatched else out


class FeedForward(Module):
    def __init__(self, hidden: int, inner: int, rng: np.random.Generator):
        self.up = Linear(hidden, inner, rng)
        self.down = Linear(inner, hidden, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.down(T.gelu(self.up(x)))


class EncoderLayer(Module):
    """Post-norm block: ``y = LN(x + MHA(x)); out = LN(y + FFN(y))``."""

    def __init__(self, hidden: int, heads: int, rng: np.random.Generator,
                 ffn_mult: int = 4, eps: float = 1e-12):
        self.attention = MultiHeadSelfAttention(hidden, heads, rng)
        self.attention_norm = LayerNorm(hidden, eps)
        self.ffn = FeedForward(hidden, ffn_mult * hidden, rng)
        self.ffn_norm = LayerNorm(hidden, eps)

    def forward(self, x: Tensor) -> Tensor:
        y = self.attention_norm(T.add(x, self.attention(x)))
        return self.ffn_norm(T.add(y, self.ffn(y)))


class EncoderStack(Module):
    def __init__(self, num_layers: int, hidden: int, heads: int, rng: np.random.Generator,
                 ffn_mult: int = 4, eps: float = 1e-12):
        if num_layers < 1:
            raise ValueError("an encoder stack needs at least one layer")
        self.layers = [EncoderLayer(hidden, heads, rng, ffn_mult, eps) for _ in range(num_layers)]

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x
