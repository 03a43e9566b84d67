"""Minimal deterministic array engine with reverse-mode automatic differentiation.

Values live in numpy buffers. Every operation returns a :class:`Tensor` that
remembers its inputs and a closure mapping the output gradient to the input
gradients; :func:`backward` walks the recorded graph in reverse topological
order.

Two run-level switches live on :class:`Runtime`: the element dtype, and the
*exact* reduction mode. In exact mode every reduction along a contraction or
sequence axis is accumulated strictly left to right, independently of the
sizes of the other axes, so results for a query row never depend on how many
rows or masked keys surround it.
"""

from __future__ import annotations

import logging
import math
import threading
from contextlib import contextmanager
from typing import TYPE_CHECKING, Any, Callable, ClassVar

import numpy as np

from mslm.errors import GradientError, NonFiniteError, ShapeError

if TYPE_CHECKING:
    from collections.abc import Iterator, Sequence

log = logging.getLogger(__name__)

Backward = Callable[[np.ndarray], "tuple[np.ndarray | None, ...]"]
Index = Any

LAYER_NORM_EPS = 1e-5


class Runtime:
    """Run-level numeric settings shared by every graph."""

    dtype: ClassVar[np.dtype] = np.dtype(np.float64)
    exact: ClassVar[bool] = False
    check_finite: ClassVar[bool] = True


def set_dtype(dtype: str | type | np.dtype) -> None:
    """Select the element type (float32 or float64) for new tensors."""
    resolved = np.dtype(dtype)
    if resolved not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported element type {resolved}")
    Runtime.dtype = resolved


def set_exact(exact: bool) -> None:
    """Toggle fixed-order reductions."""
    Runtime.exact = bool(exact)


@contextmanager
def runtime(
    dtype: str | type | np.dtype | None = None, exact: bool | None = None
) -> Iterator[None]:
    """Temporarily change the run-level numeric settings."""
    saved = (Runtime.dtype, Runtime.exact)
    try:
        if dtype is not None:
            set_dtype(dtype)
        if exact is not None:
            set_exact(exact)
        yield
    finally:
        Runtime.dtype, Runtime.exact = saved


# Gradient recording can be switched off per thread
_grad_state = threading.local()


def is_grad_enabled() -> bool:
    """Return True if operations on this thread record a graph."""
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording on the current thread."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


def reduce_sum(x: np.ndarray, axis: int, keepdims: bool = False) -> np.ndarray:
    """Sum along one axis, in fixed left-to-right order when exact mode is on."""
    if not Runtime.exact:
        return x.sum(axis=axis, keepdims=keepdims)
    if x.shape[axis] == 0:
        return np.zeros_like(x).sum(axis=axis, keepdims=keepdims)
    out = np.cumsum(x, axis=axis).take(-1, axis=axis)
    if keepdims:
        out = np.expand_dims(out, axis)
    return out


def _matmul_data(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if not Runtime.exact:
        return np.matmul(a, b)
    shape = (
        *np.broadcast_shapes(a.shape[:-2], b.shape[:-2]),
        a.shape[-2],
        b.shape[-1],
    )
    out = np.zeros(shape, dtype=np.result_type(a, b))
    for i in range(a.shape[-1]):
        out = out + a[..., :, i : i + 1] * b[..., i : i + 1, :]
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


class Tensor:
    """A node in a dynamically built computation graph.

    Leaves are created directly; interior nodes come from the operation
    functions in this module. ``grad`` has the shape of ``data`` and starts at
    zero.
    """

    __slots__ = ("_backward", "_grad", "data", "name", "op", "parents", "requires_grad")

    data: np.ndarray
    requires_grad: bool
    op: str
    parents: tuple[Tensor, ...]
    name: str

    def __init__(self, data: Any, requires_grad: bool = False, *, name: str = "") -> None:
        """Create a leaf tensor holding a copy of ``data`` in the run dtype."""
        self.data = np.array(data, dtype=Runtime.dtype)
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.parents = ()
        self._backward: Backward | None = None
        self._grad: np.ndarray | None = None
        self.name = name

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self.op == "leaf"

    @property
    def grad(self) -> np.ndarray:
        """Accumulated gradient; zeros until a backward pass reaches this node."""
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value: np.ndarray) -> None:
        self._grad = value

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", [self.shape], "tensor is not a scalar")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    # Operator sugar
    def __add__(self, other: Tensor | float) -> Tensor:
        return add(self, as_tensor(other))

    def __radd__(self, other: float) -> Tensor:
        return add(as_tensor(other), self)

    def __sub__(self, other: Tensor | float) -> Tensor:
        return sub(self, as_tensor(other))

    def __rsub__(self, other: float) -> Tensor:
        return sub(as_tensor(other), self)

    def __mul__(self, other: Tensor | float) -> Tensor:
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other: float) -> Tensor:
        return scale(self, float(other))

    def __truediv__(self, other: float) -> Tensor:
        return scale(self, 1.0 / float(other))

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, index: Index) -> Tensor:
        return take(self, index)


def as_tensor(value: Tensor | Any) -> Tensor:
    """Wrap a constant as a tensor that does not require gradients."""
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(
    op: str, data: np.ndarray, parents: Sequence[Tensor], backward: Backward
) -> Tensor:
    if Runtime.check_finite and not np.isfinite(data).all():
        raise NonFiniteError(op)
    out = Tensor.__new__(Tensor)
    out.data = data
    track = is_grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out.op = op
    out.parents = tuple(parents) if track else ()
    out._backward = backward if track else None
    out._grad = None
    out.name = ""
    return out


def _broadcast_check(op: str, *tensors: Tensor) -> None:
    try:
        np.broadcast_shapes(*(t.shape for t in tensors))
    except ValueError:
        raise ShapeError(op, [t.shape for t in tensors]) from None


# Elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check("add", a, b)

    def backward(g: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result("add", a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check("sub", a, b)

    def backward(g: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result("sub", a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with broadcasting."""
    _broadcast_check("mul_elementwise", a, b)

    def backward(g: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result("mul_elementwise", a.data * b.data, (a, b), backward)


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a constant."""
    c = a.data.dtype.type(factor)

    def backward(g: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (g * c,)

    return _result("scale_by_constant", a.data * c, (a,), backward)


# Linear algebra and shape manipulation


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", [a.shape, b.shape])
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", [a.shape, b.shape], "batch axes") from None

    def backward(g: np.ndarray) -> tuple[np.ndarray | None, ...]:
        grad_a = _matmul_data(g, _swap_last(b.data)) if a.requires_grad else None
        grad_b = _matmul_data(_swap_last(a.data), g) if b.requires_grad else None
        return (
            None if grad_a is None else _unbroadcast(grad_a, a.shape),
            None if grad_b is None else _unbroadcast(grad_b, b.shape),
        )

    return _result("matmul", _matmul_data(a.data, b.data), (a, b), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along ``axis`` (the last axis by default)."""
    if not tensors:
        raise ShapeError("concat", [], "nothing to concatenate")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors:
        if t.ndim != ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax
        ):
            raise ShapeError("concat", [t.shape for t in tensors])
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return tuple(np.split(g, cuts, axis=ax))

    data = np.concatenate([t.data for t in tensors], axis=ax)
    return _result("concat", data, tuple(tensors), backward)


def take(a: Tensor, index: Index) -> Tensor:
    """Basic slicing (``a[index]``) with a scatter-add backward."""
    try:
        data = np.array(a.data[index])
    except IndexError as exc:
        raise ShapeError("slice", [a.shape], str(exc)) from None

    items = index if isinstance(index, tuple) else (index,)
    basic = all(i is None or i is Ellipsis or isinstance(i, (int, slice)) for i in items)

    def backward(g: np.ndarray) -> tuple[np.ndarray | None, ...]:
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result("slice", data, (a,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        data = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError("reshape", [a.shape, tuple(shape)]) from None

    def backward(g: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (g.reshape(a.shape),)

    return _result("reshape", data, (a,), backward)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(ax % a.ndim for ax in axes) != list(range(a.ndim)):
        raise ShapeError("transpose", [a.shape], f"bad axes {axes}")
    inverse = tuple(np.argsort([ax % a.ndim for ax in axes]))

    def backward(g: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (g.transpose(inverse),)

    return _result("transpose", a.data.transpose(axes), (a,), backward)


def swap_last(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``weight`` for integer ``ids``."""
    ids = np.asarray(ids)
    if weight.ndim != 2 or not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding_lookup", [weight.shape, ids.shape])
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError(
            "embedding_lookup",
            [weight.shape, ids.shape],
            f"id out of range [0, {weight.shape[0]}): min {ids.min()}, max {ids.max()}",
        )

    def backward(g: np.ndarray) -> tuple[np.ndarray | None, ...]:
        grad = np.zeros_like(weight.data)
        np.add.at(grad, ids, g)
        return (grad,)

    return _result("embedding_lookup", weight.data[ids], (weight,), backward)


# Nonlinearities and normalization


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with an optional additive (0 / -inf) mask.

    Rows where every entry is masked produce all-zero weights.
    """
    if mask is not None:
        try:
            fits = np.broadcast_shapes(x.shape, np.shape(mask)) == x.shape
        except ValueError:
            fits = False
        if not fits:
            raise ShapeError("softmax_last_dim", [x.shape, np.shape(mask)])
    z = x.data if mask is None else x.data + mask
    peak = z.max(axis=-1, keepdims=True) if z.shape[-1] else np.zeros((*z.shape[:-1], 1))
    peak = np.where(np.isfinite(peak), peak, 0.0).astype(z.dtype)
    e = np.exp(z - peak)
    total = reduce_sum(e, axis=-1, keepdims=True)
    y = e / np.where(total > 0, total, 1.0)

    def backward(g: np.ndarray) -> tuple[np.ndarray | None, ...]:
        inner = reduce_sum(g * y, axis=-1, keepdims=True)
        return (y * (g - inner),)

    return _result("softmax_last_dim", y, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then scale and shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm", [x.shape, gain.shape, bias.shape])
    mean = reduce_sum(x.data, axis=-1, keepdims=True) / d
    centered = x.data - mean
    var = reduce_sum(centered * centered, axis=-1, keepdims=True) / d
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def backward(g: np.ndarray) -> tuple[np.ndarray | None, ...]:
        gxhat = g * gain.data
        mean_g = reduce_sum(gxhat, axis=-1, keepdims=True) / d
        mean_gx = reduce_sum(gxhat * xhat, axis=-1, keepdims=True) / d
        grad_x = inv * (gxhat - mean_g - xhat * mean_gx)
        return (
            grad_x,
            _unbroadcast(g * xhat, gain.shape),
            _unbroadcast(g, bias.shape),
        )

    return _result("layer_norm", xhat * gain.data + bias.data, (x, gain, bias), backward)


_erf = np.vectorize(math.erf, otypes=[np.float64])
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GeLU, ``x * Phi(x)`` with Phi the standard normal CDF."""
    cdf = (0.5 * (1.0 + _erf(x.data * _INV_SQRT2))).astype(x.data.dtype)

    def backward(g: np.ndarray) -> tuple[np.ndarray | None, ...]:
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _result("gelu", x.data * cdf, (x,), backward)


def dropout(
    x: Tensor,
    p: float,
    rng: np.random.Generator | None = None,
    training: bool = True,
    mask: np.ndarray | None = None,
) -> Tensor:
    """Inverted dropout; the identity at eval time or when ``p == 0``.

    A precomputed keep-``mask`` may be passed instead of a generator.
    """
    if not training or p <= 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if mask is None:
        if rng is None:
            raise ValueError("dropout in training mode needs a generator or a mask")
        mask = rng.random(x.shape) >= p
    keep = mask.astype(x.data.dtype) / x.data.dtype.type(1.0 - p)

    def backward(g: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (g * keep,)

    return _result("dropout", x.data * keep, (x,), backward)


# Sequence pooling and convolutions (sequence axis is -2, features -1)


def _frames(op: str, x: Tensor, k: int) -> tuple[int, int]:
    if x.ndim < 2 or k < 1:
        raise ShapeError(op, [x.shape], f"factor {k}")
    return x.shape[-2] // k, x.shape[-1]


def mean_pool(x: Tensor, k: int) -> Tensor:
    """Average non-overlapping windows of ``k`` positions; a trailing partial window is dropped."""
    n_frames, d = _frames("mean_pool_1d", x, k)
    lead = x.shape[:-2]
    used = n_frames * k
    windows = x.data[..., :used, :].reshape(*lead, n_frames, k, d)
    data = reduce_sum(windows, axis=-2) / x.data.dtype.type(k)

    def backward(g: np.ndarray) -> tuple[np.ndarray | None, ...]:
        grad = np.zeros_like(x.data)
        spread = np.repeat(g / g.dtype.type(k), k, axis=-2)
        grad[..., :used, :] = spread
        return (grad,)

    return _result("mean_pool_1d", data, (x,), backward)


def max_pool(x: Tensor, k: int) -> Tensor:
    """Elementwise max over non-overlapping windows of ``k`` positions."""
    n_frames, d = _frames("max_pool_1d", x, k)
    lead = x.shape[:-2]
    used = n_frames * k
    windows = x.data[..., :used, :].reshape(*lead, n_frames, k, d)
    winner = windows.argmax(axis=-2)
    data = np.take_along_axis(windows, winner[..., None, :], axis=-2)[..., 0, :]

    def backward(g: np.ndarray) -> tuple[np.ndarray | None, ...]:
        routed = np.zeros_like(windows)
        np.put_along_axis(routed, winner[..., None, :], g[..., None, :], axis=-2)
        grad = np.zeros_like(x.data)
        grad[..., :used, :] = routed.reshape(*lead, used, d)
        return (grad,)

    return _result("max_pool_1d", data, (x,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` of shape (in, out)."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError("linear", [x.shape, weight.shape])
    out = matmul(x, weight)
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ShapeError("linear", [x.shape, weight.shape, bias.shape], "bias")
        out = add(out, bias)
    return out


def causal_conv(x: Tensor, weight: Tensor, bias: Tensor | None, k: int) -> Tensor:
    """Strided convolution with kernel ``k`` and stride ``k``.

    ``weight`` has shape (k * d_in, d_out); each output frame sees exactly the
    ``k`` positions it covers.
    """
    n_frames, d = _frames("causal_conv_1d", x, k)
    if weight.shape[0] != k * d:
        raise ShapeError("causal_conv_1d", [x.shape, weight.shape], f"kernel {k}")
    lead = x.shape[:-2]
    trimmed = x if n_frames * k == x.shape[-2] else take(x, (..., slice(0, n_frames * k), slice(None)))
    return linear(reshape(trimmed, (*lead, n_frames, k * d)), weight, bias)


def transpose_conv(h: Tensor, weight: Tensor, bias: Tensor | None, r: int) -> Tensor:
    """Transpose convolution with kernel ``r`` and stride ``r``.

    ``weight`` has shape (d_in, r * d_out); output position ``p`` is a linear
    function of input frame ``p // r`` only.
    """
    if h.ndim < 2 or weight.ndim != 2 or weight.shape[1] % r or h.shape[-1] != weight.shape[0]:
        raise ShapeError("transpose_conv_1d", [h.shape, weight.shape], f"stride {r}")
    d_out = weight.shape[1] // r
    taps = matmul(h, weight)
    out = reshape(taps, (*h.shape[:-2], h.shape[-2] * r, d_out))
    if bias is not None:
        out = add(out, bias)
    return out


# Reductions and losses


def sum_all(x: Tensor) -> Tensor:
    def backward(g: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result("sum", np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / max(1, x.data.size))


def log_softmax_data(logits: np.ndarray) -> np.ndarray:
    """Numerically stable log-softmax over the last axis (no graph)."""
    peak = logits.max(axis=-1, keepdims=True)
    shifted = logits - peak
    return shifted - np.log(reduce_sum(np.exp(shifted), axis=-1, keepdims=True))


def token_nll(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-position negative log-likelihood of integer ``targets`` (no graph)."""
    logp = log_softmax_data(logits)
    return -np.take_along_axis(logp, np.asarray(targets)[..., None], axis=-1)[..., 0]


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean next-token cross-entropy of integer ``targets`` under ``logits``."""
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError("cross_entropy_from_logits", [logits.shape, targets.shape])
    vocab = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise ShapeError(
            "cross_entropy_from_logits", [logits.shape, targets.shape], "target id out of range"
        )
    logp = log_softmax_data(logits.data)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)
    count = max(1, targets.size)
    loss = np.asarray(-picked.sum() / count, dtype=logits.data.dtype)

    def backward(g: np.ndarray) -> tuple[np.ndarray | None, ...]:
        grad = np.exp(logp)
        index = targets[..., None]
        np.put_along_axis(grad, index, np.take_along_axis(grad, index, axis=-1) - 1.0, axis=-1)
        return (grad * (g / count),)

    return _result("cross_entropy_from_logits", loss, (logits,), backward)


def cross_entropy_dist(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean cross-entropy ``-sum q log p`` against target distributions ``q``."""
    target = np.asarray(target, dtype=logits.data.dtype)
    if target.shape != logits.shape:
        raise ShapeError("cross_entropy_vs_distribution", [logits.shape, target.shape])
    logp = log_softmax_data(logits.data)
    rows = max(1, int(np.prod(logits.shape[:-1])))
    loss = np.asarray(-(target * logp).sum() / rows, dtype=logits.data.dtype)

    def backward(g: np.ndarray) -> tuple[np.ndarray | None, ...]:
        mass = target.sum(axis=-1, keepdims=True)
        return ((np.exp(logp) * mass - target) * (g / rows),)

    return _result("cross_entropy_vs_distribution", loss, (logits,), backward)


# Graph traversal


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        stack.extend((parent, False) for parent in node.parents if id(parent) not in seen)
    return order


def backward(root: Tensor) -> list[Tensor]:
    """Back-propagate from a scalar ``root`` into every reachable leaf.

    Leaf gradients accumulate across calls; interior nodes hold the gradient
    of the most recent pass.

    Returns:
        The leaves that received a gradient, in reverse topological order.
    """
    if root.data.size != 1:
        raise GradientError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return []
    pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaves: list[Tensor] = []
    for node in reversed(_topological_order(root)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if not np.isfinite(g).all():
                raise NonFiniteError(node.name or node.op, where="gradient")
            node.grad = node.grad + g
            leaves.append(node)
            continue
        node.grad = g
        for parent, grad in zip(node.parents, node._backward(g)):
            if grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + grad if key in pending else grad
    log.debug("backward reached %d leaves", len(leaves))
    return leaves


OPS: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul_elementwise": mul,
    "scale_by_constant": scale,
    "matmul": matmul,
    "concat_last_dim": concat,
    "slice": take,
    "reshape": reshape,
    "transpose": transpose,
    "embedding_lookup": embedding,
    "softmax_last_dim": softmax,
    "layer_norm": layer_norm,
    "gelu": gelu,
    "dropout": dropout,
    "mean_pool_1d": mean_pool,
    "max_pool_1d": max_pool,
    "causal_conv_1d": causal_conv,
    "transpose_conv_1d": transpose_conv,
    "linear": linear,
    "cross_entropy_from_logits": cross_entropy,
    "cross_entropy_vs_distribution": cross_entropy_dist,
    "sum": sum_all,
    "mean": mean_all,
}


def forward_op(kind: str, *inputs: Any, **attrs: Any) -> Tensor:
    """Dispatch an operation by its kind name."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **attrs)
