"""Central-difference gradient checking for every differentiable op kind."""

from __future__ import annotations

from typing import TYPE_CHECKING, Callable

import numpy as np

from mslm import tensor as tc
from mslm.tensor import Tensor, runtime

if TYPE_CHECKING:
    from collections.abc import Sequence

Case = tuple["list[Tensor]", Callable[..., Tensor]]

FD_STEP = 1e-5


def _param(rng: np.random.Generator, *shape: int, offset: float = 0.0) -> Tensor:
    return Tensor(rng.normal(size=shape) + offset, requires_grad=True)


def _masked_scores(rng: np.random.Generator) -> Case:
    x = _param(rng, 3, 4)
    mask = np.zeros((3, 4))
    mask[0, 2] = -np.inf
    mask[1, 3] = -np.inf
    return [x], lambda a: tc.softmax(a, mask)


def _max_pool_case(rng: np.random.Generator) -> Case:
    # Well-separated values keep finite differences away from ties
    values = rng.permutation(24).reshape(8, 3).astype(np.float64) * 0.5
    return [Tensor(values, requires_grad=True)], lambda a: tc.max_pool(a, 4)


def _dropout_case(rng: np.random.Generator) -> Case:
    keep = rng.random((4, 5)) >= 0.3
    return [_param(rng, 4, 5)], lambda a: tc.dropout(a, 0.3, mask=keep)


def _embedding_case(rng: np.random.Generator) -> Case:
    ids = rng.integers(0, 5, size=(2, 3))
    return [_param(rng, 5, 4)], lambda w: tc.embedding(w, ids)


def _ce_case(rng: np.random.Generator) -> Case:
    targets = rng.integers(0, 6, size=(2, 3))
    return [_param(rng, 2, 3, 6)], lambda z: tc.cross_entropy(z, targets)


def _ce_dist_case(rng: np.random.Generator) -> Case:
    target = rng.random((3, 5))
    target /= target.sum(axis=-1, keepdims=True)
    return [_param(rng, 3, 5)], lambda z: tc.cross_entropy_dist(z, target)


CASES: dict[str, Callable[[np.random.Generator], Case]] = {
    "matmul": lambda r: ([_param(r, 3, 4), _param(r, 4, 2)], tc.matmul),
    "add": lambda r: ([_param(r, 3, 4), _param(r, 4)], tc.add),
    "sub": lambda r: ([_param(r, 3, 4), _param(r, 3, 1)], tc.sub),
    "mul_elementwise": lambda r: ([_param(r, 3, 4), _param(r, 3, 4)], tc.mul),
    "scale_by_constant": lambda r: ([_param(r, 5)], lambda a: tc.scale(a, -1.7)),
    "concat_last_dim": lambda r: (
        [_param(r, 2, 3), _param(r, 2, 2)],
        lambda a, b: tc.concat([a, b]),
    ),
    "slice": lambda r: ([_param(r, 4, 5)], lambda a: a[1:3, ::2]),
    "reshape": lambda r: ([_param(r, 2, 6)], lambda a: tc.reshape(a, (3, 4))),
    "transpose": lambda r: ([_param(r, 2, 3, 4)], lambda a: tc.transpose(a, (2, 0, 1))),
    "embedding_lookup": _embedding_case,
    "softmax_last_dim": _masked_scores,
    "layer_norm": lambda r: (
        [_param(r, 2, 8), _param(r, 8, offset=1.0), _param(r, 8)],
        tc.layer_norm,
    ),
    "gelu": lambda r: ([_param(r, 16)], tc.gelu),
    "dropout": _dropout_case,
    "mean_pool_1d": lambda r: ([_param(r, 8, 3)], lambda a: tc.mean_pool(a, 4)),
    "max_pool_1d": _max_pool_case,
    "causal_conv_1d": lambda r: (
        [_param(r, 8, 3), _param(r, 12, 2), _param(r, 2)],
        lambda x, w, b: tc.causal_conv(x, w, b, 4),
    ),
    "transpose_conv_1d": lambda r: (
        [_param(r, 2, 3), _param(r, 3, 8), _param(r, 2)],
        lambda h, w, b: tc.transpose_conv(h, w, b, 4),
    ),
    "linear": lambda r: ([_param(r, 4, 3), _param(r, 3, 5), _param(r, 5)], tc.linear),
    "cross_entropy_from_logits": _ce_case,
    "cross_entropy_vs_distribution": _ce_dist_case,
}


def check_function(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    seed: int = 0,
    step: float = FD_STEP,
    sample: int | None = None,
) -> float:
    """Compare analytic and central-difference gradients of ``fn`` at ``inputs``.

    Non-scalar outputs are reduced with a fixed random projection so every
    output element contributes. With ``sample``, only that many seeded random
    elements of each input are perturbed.

    Returns:
        max |analytic - numeric| / max(1, |numeric|) over every input element.
    """
    with runtime(dtype=np.float64):
        projection: np.ndarray | None = None

        def objective() -> Tensor:
            nonlocal projection
            out = fn(*inputs)
            if out.data.size == 1:
                return tc.sum_all(out)
            if projection is None:
                projection = np.random.default_rng(seed + 1).normal(size=out.shape)
            return tc.sum_all(tc.mul(out, Tensor(projection)))

        picker = np.random.default_rng(seed + 2)
        for t in inputs:
            t.zero_grad()
        tc.backward(objective())
        worst = 0.0
        for t in inputs:
            if not t.requires_grad:
                continue
            analytic = t.grad.copy()
            flat = t.data.reshape(-1)
            indices = range(flat.size)
            if sample is not None and sample < flat.size:
                indices = picker.choice(flat.size, size=sample, replace=False)
            for i in indices:
                original = flat[i]
                flat[i] = original + step
                plus = objective().item()
                flat[i] = original - step
                minus = objective().item()
                flat[i] = original
                numeric = (plus - minus) / (2 * step)
                err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
                worst = max(worst, err)
        return worst


def grad_check(op_kind: str, seed: int = 0) -> float:
    """Gradient-check one op kind on a random input drawn from ``seed``.

    Returns:
        The maximum relative error (the caller asserts the threshold).
    """
    try:
        build = CASES[op_kind]
    except KeyError:
        raise ValueError(f"no gradient case for op kind {op_kind!r}") from None
    with runtime(dtype=np.float64):
        inputs, fn = build(np.random.default_rng(seed))
        return check_function(fn, inputs, seed=seed)
