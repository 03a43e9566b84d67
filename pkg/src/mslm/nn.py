"""Transformer building blocks: attention with per-head key/value sources, feedforward, embeddings."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from mslm import tensor as tc
from mslm.errors import ShapeError
from mslm.tensor import Tensor

if TYPE_CHECKING:
    from collections.abc import Iterator, Sequence

    from mslm.masks import AttentionMask

INIT_STD = 0.02


@dataclass(frozen=True)
class Context:
    """Per-forward-pass mode: whether dropout is active and where its masks come from."""

    training: bool = False
    rng: np.random.Generator | None = None


EVAL = Context()


class Module:
    """Base class for anything that owns parameters.

    Parameters are discovered by walking instance attributes in definition
    order: tensors that require gradients, sub-modules, and lists or dicts of
    sub-modules. A tensor shared by two modules is reported once.
    """

    def named_parameters(
        self, prefix: str = "", _seen: set[int] | None = None
    ) -> Iterator[tuple[str, Tensor]]:
        seen = set() if _seen is None else _seen
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad and id(value) not in seen:
                    seen.add(id(value))
                    yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{path}.", seen)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.", seen)
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{key}.", seen)

    def parameters(self) -> list[Tensor]:
        return [p for _name, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        """Copy arrays into the matching parameters; names and shapes must agree exactly."""
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing {missing}, unexpected {unexpected}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ShapeError("load_state_dict", [p.shape, value.shape], name)
            p.data = value.astype(p.data.dtype, copy=True)


def normal_param(rng: np.random.Generator, *shape: int, std: float = INIT_STD) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def zeros_param(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones_param(*shape: int) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


class Linear(Module):
    """Affine map with weight of shape (d_in, d_out)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True) -> None:
        self.weight = normal_param(rng, d_in, d_out)
        self.bias = zeros_param(d_out) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return tc.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d_model: int) -> None:
        self.gain = ones_param(d_model)
        self.bias = zeros_param(d_model)

    def __call__(self, x: Tensor) -> Tensor:
        return tc.layer_norm(x, self.gain, self.bias)


@dataclass(frozen=True)
class HeadGroup:
    """A run of consecutive heads reading keys/values from one source under one mask."""

    heads: int
    source: int
    mask: AttentionMask


@dataclass(frozen=True)
class AttentionSpec:
    """Partition of attention heads into groups, in head order."""

    num_heads: int
    groups: tuple[HeadGroup, ...]

    def __post_init__(self) -> None:
        if any(g.heads < 1 for g in self.groups):
            raise ValueError("every head group needs at least one head")
        total = sum(g.heads for g in self.groups)
        if total != self.num_heads:
            raise ValueError(
                f"head groups cover {total} heads but the layer has {self.num_heads}"
            )

    @classmethod
    def single(cls, num_heads: int, mask: AttentionMask) -> AttentionSpec:
        """All heads on source 0 under one mask (plain self-attention)."""
        return cls(num_heads, (HeadGroup(num_heads, 0, mask),))


class MultiHeadAttention(Module):
    """Scaled dot-product attention; each head group may read a different key/value source."""

    def __init__(
        self, d_model: int, num_heads: int, dropout: float, rng: np.random.Generator
    ) -> None:
        if d_model % num_heads:
            raise ValueError(f"d_model {d_model} is not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.d_head = d_model // num_heads
        self.dropout = dropout
        self.query = Linear(d_model, d_model, rng)
        self.key = Linear(d_model, d_model, rng)
        self.value = Linear(d_model, d_model, rng)
        self.output = Linear(d_model, d_model, rng)

    def _split(self, x: Tensor) -> Tensor:
        b, n, _d = x.shape
        return tc.transpose(tc.reshape(x, (b, n, self.num_heads, self.d_head)), (0, 2, 1, 3))

    def heads(
        self,
        x: Tensor,
        sources: Sequence[Tensor],
        spec: AttentionSpec,
        ctx: Context = EVAL,
    ) -> Tensor:
        """Per-head context vectors before the output projection, shape (B, heads, T, d_head)."""
        if x.ndim != 3:
            raise ShapeError("multi_head_attention", [x.shape], "expected (batch, time, d_model)")
        if spec.num_heads != self.num_heads:
            raise ValueError(f"spec has {spec.num_heads} heads, layer has {self.num_heads}")
        query_len = x.shape[1]
        q = self._split(self.query(x))
        projected: dict[int, tuple[Tensor, Tensor]] = {}
        outputs: list[Tensor] = []
        start = 0
        for group in spec.groups:
            source = sources[group.source]
            if group.mask.shape != (query_len, source.shape[1]):
                raise ShapeError(
                    "multi_head_attention",
                    [x.shape, source.shape, group.mask.shape],
                    "mask does not match query/key lengths",
                )
            if group.source not in projected:
                projected[group.source] = (
                    self._split(self.key(source)),
                    self._split(self.value(source)),
                )
            k, v = projected[group.source]
            heads = (slice(None), slice(start, start + group.heads))
            scores = tc.scale(tc.matmul(q[heads], tc.swap_last(k[heads])), 1.0 / math.sqrt(self.d_head))
            weights = tc.softmax(scores, group.mask.additive)
            weights = tc.dropout(weights, self.dropout, ctx.rng, ctx.training)
            outputs.append(tc.matmul(weights, v[heads]))
            start += group.heads
        return outputs[0] if len(outputs) == 1 else tc.concat(outputs, axis=1)

    def __call__(
        self,
        x: Tensor,
        sources: Sequence[Tensor],
        spec: AttentionSpec,
        ctx: Context = EVAL,
    ) -> Tensor:
        context = self.heads(x, sources, spec, ctx)
        b, _h, n, _d = context.shape
        merged = tc.reshape(tc.transpose(context, (0, 2, 1, 3)), (b, n, self.num_heads * self.d_head))
        return self.output(merged)


def multi_head_attention(
    attention: MultiHeadAttention,
    queries: Tensor,
    sources: Sequence[Tensor],
    spec: AttentionSpec,
    ctx: Context = EVAL,
) -> Tensor:
    return attention(queries, sources, spec, ctx)


class FeedForward(Module):
    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator) -> None:
        self.inner = Linear(d_model, d_ff, rng)
        self.outer = Linear(d_ff, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.outer(tc.gelu(self.inner(x)))


class TransformerLayer(Module):
    """Post-norm block: attention, residual, LayerNorm, then GeLU feedforward, residual, LayerNorm."""

    def __init__(
        self,
        d_model: int,
        num_heads: int,
        d_ff: int,
        dropout: float,
        rng: np.random.Generator,
    ) -> None:
        self.dropout = dropout
        self.attention = MultiHeadAttention(d_model, num_heads, dropout, rng)
        self.norm1 = LayerNorm(d_model)
        self.feedforward = FeedForward(d_model, d_ff, rng)
        self.norm2 = LayerNorm(d_model)

    def __call__(
        self,
        x: Tensor,
        spec: AttentionSpec,
        sources: Sequence[Tensor] | None = None,
        ctx: Context = EVAL,
    ) -> Tensor:
        attended = self.attention(x, [x] if sources is None else sources, spec, ctx)
        x = self.norm1(tc.add(x, tc.dropout(attended, self.dropout, ctx.rng, ctx.training)))
        fed = self.feedforward(x)
        return self.norm2(tc.add(x, tc.dropout(fed, self.dropout, ctx.rng, ctx.training)))


class Embeddings(Module):
    """Word embeddings plus learned absolute position embeddings."""

    def __init__(self, vocab_size: int, max_len: int, d_model: int, rng: np.random.Generator) -> None:
        self.word = normal_param(rng, vocab_size, d_model)
        self.position = normal_param(rng, max_len, d_model)

    @property
    def vocab_size(self) -> int:
        return self.word.shape[0]

    @property
    def max_len(self) -> int:
        return self.position.shape[0]

    def __call__(self, tokens: np.ndarray, position_offset: int = 0) -> Tensor:
        tokens = np.asarray(tokens)
        n = tokens.shape[-1]
        if position_offset < 0 or position_offset + n > self.max_len:
            raise ShapeError(
                "embed",
                [tokens.shape],
                f"positions {position_offset}..{position_offset + n - 1} exceed context {self.max_len}",
            )
        positions = np.arange(position_offset, position_offset + n)
        return tc.add(tc.embedding(self.word, tokens), tc.embedding(self.position, positions))


def embed(embeddings: Embeddings, tokens: np.ndarray, position_offset: int = 0) -> Tensor:
    return embeddings(tokens, position_offset)


class LMHead(Module):
    """Linear map to vocabulary logits, optionally tied to the word embeddings."""

    def __init__(
        self,
        d_model: int,
        vocab_size: int,
        rng: np.random.Generator,
        tied: Embeddings | None = None,
        bias: bool = True,
    ) -> None:
        self.tied = tied
        self.weight = None if tied is not None else normal_param(rng, d_model, vocab_size)
        self.bias = zeros_param(vocab_size) if bias else None

    def __call__(self, h: Tensor) -> Tensor:
        if self.tied is not None:
            logits = tc.matmul(h, tc.swap_last(self.tied.word))
            return logits if self.bias is None else tc.add(logits, self.bias)
        assert self.weight is not None
        return tc.linear(h, self.weight, self.bias)
