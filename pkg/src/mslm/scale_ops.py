"""Causal downsampling, transpose-convolution upsampling, and the concat-project fusion.

A frame ``j`` at factor ``k`` covers positions ``[j*k, (j+1)*k - 1]``; its
timestamp is the last covered position. Every downsampler reads only the
positions of its own frame.
"""

from __future__ import annotations

from typing import Literal

import numpy as np

from mslm import tensor as tc
from mslm.errors import DivisibilityError, ShapeError
from mslm.nn import Module, normal_param, zeros_param
from mslm.tensor import Tensor

Method = Literal["avg_pool", "max_pool", "causal_conv"]
METHODS: tuple[str, ...] = ("avg_pool", "max_pool", "causal_conv")


def frame_timestamp(j: int | np.ndarray, k: int) -> int | np.ndarray:
    """Last input position covered by frame ``j`` at factor ``k``."""
    return (j + 1) * k - 1


class Downsampler(Module):
    """Reduce a sequence by an integer ``factor``; ``causal_conv`` learns a (k*D, D) kernel."""

    def __init__(
        self,
        method: Method,
        factor: int,
        d_model: int,
        rng: np.random.Generator | None = None,
    ) -> None:
        if method not in METHODS:
            raise ValueError(f"unknown downsampling method {method!r}, expected one of {METHODS}")
        if factor < 1:
            raise ValueError(f"downsampling factor must be positive, got {factor}")
        self.method = method
        self.factor = factor
        self.weight: Tensor | None = None
        self.bias: Tensor | None = None
        if method == "causal_conv" and factor > 1:
            if rng is None:
                raise ValueError("causal_conv needs a generator to initialise its kernel")
            self.weight = normal_param(rng, factor * d_model, d_model)
            self.bias = zeros_param(d_model)

    def __call__(self, x: Tensor, strict: bool = True) -> Tensor:
        return downsample(x, self, strict=strict)


def downsample(x: Tensor, d: Downsampler, strict: bool = True) -> Tensor:
    """Aggregate each frame of ``d.factor`` positions into one vector.

    With ``strict`` a length that is not a multiple of the factor raises
    :class:`DivisibilityError`; otherwise the trailing partial frame is
    dropped (it would need future positions).
    """
    k = d.factor
    length = x.shape[-2]
    if strict and length % k:
        raise DivisibilityError(length, k, "downsample input")
    if k == 1:
        return x
    if d.method == "avg_pool":
        return tc.mean_pool(x, k)
    if d.method == "max_pool":
        return tc.max_pool(x, k)
    return tc.causal_conv(x, d.weight, d.bias, k)  # type: ignore[arg-type]


class Upsampler(Module):
    """Transpose convolution with kernel and stride ``factor``."""

    def __init__(
        self, factor: int, d_model: int, rng: np.random.Generator, activation: bool = False
    ) -> None:
        if factor < 1:
            raise ValueError(f"upsampling factor must be positive, got {factor}")
        self.factor = factor
        self.activation = activation
        self.weight = normal_param(rng, d_model, factor * d_model)
        self.bias = zeros_param(d_model)

    def __call__(self, h: Tensor) -> Tensor:
        return upsample(h, self)


def upsample(h: Tensor, u: Upsampler) -> Tensor:
    out = tc.transpose_conv(h, u.weight, u.bias, u.factor)
    return tc.gelu(out) if u.activation else out


class Fusion(Module):
    """``gelu(W concat(a, b) + bias)`` projecting 2*d_model back to d_model."""

    def __init__(self, d_model: int, rng: np.random.Generator) -> None:
        self.weight = normal_param(rng, 2 * d_model, d_model)
        self.bias = zeros_param(d_model)

    def __call__(self, a: Tensor, b: Tensor) -> Tensor:
        return fuse(a, b, self)


def fuse(a: Tensor, b: Tensor, f: Fusion) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("fuse", [a.shape, b.shape], "inputs must have equal length and width")
    if 2 * a.shape[-1] != f.weight.shape[0]:
        raise ShapeError("fuse", [a.shape, f.weight.shape], "width does not match the projection")
    return tc.gelu(tc.linear(tc.concat([a, b], axis=-1), f.weight, f.bias))
