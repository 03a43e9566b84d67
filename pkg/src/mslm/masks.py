"""Attention masks: causal, local window, retina multi-scale windows and cross-scale.

Masks are immutable and cached per argument tuple, so repeated forward passes
share one instance.
"""

from __future__ import annotations

import functools
import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from mslm.errors import MaskError

if TYPE_CHECKING:
    from collections.abc import Sequence

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class AttentionMask:
    """Boolean ``allowed[t, j]`` matrix; keys are frames of ``key_scale`` positions."""

    allowed: np.ndarray
    key_scale: int = 1
    additive: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        allowed = np.array(self.allowed, dtype=bool)
        if allowed.ndim != 2:
            raise MaskError(f"mask must be two-dimensional, got shape {allowed.shape}")
        allowed.setflags(write=False)
        # float32 keeps float32 scores in float32; 0 and -inf are exact in both
        additive = np.where(allowed, np.float32(0.0), np.float32(-np.inf)).astype(np.float32)
        additive.setflags(write=False)
        object.__setattr__(self, "allowed", allowed)
        object.__setattr__(self, "additive", additive)

    @property
    def query_len(self) -> int:
        return self.allowed.shape[0]

    @property
    def key_len(self) -> int:
        return self.allowed.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.allowed.shape  # type: ignore[return-value]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AttentionMask):
            return NotImplemented
        return self.key_scale == other.key_scale and np.array_equal(self.allowed, other.allowed)

    def __hash__(self) -> int:
        return hash((self.key_scale, self.shape, self.allowed.tobytes()))

    def render(self) -> str:
        """One line per query: ``#`` allowed, ``.`` masked."""
        return "\n".join("".join("#" if a else "." for a in row) for row in self.allowed)


@dataclass(frozen=True)
class WindowBoundaries:
    """Half-open distance windows ``[lo, hi)`` per scale, finest first."""

    windows: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        if not self.windows:
            raise MaskError("at least one window is required")
        expected_lo = 0
        for lo, hi in self.windows:
            if lo > expected_lo:
                raise MaskError(f"gap between windows: expected a window starting at {expected_lo}, got {lo}:{hi}")
            if lo < expected_lo:
                raise MaskError(
                    f"overlapping windows ({lo}:{hi} starts before {expected_lo}); "
                    "only non-overlapping windows are representable"
                )
            if hi <= lo:
                raise MaskError(f"empty window {lo}:{hi}")
            expected_lo = hi

    @classmethod
    def parse(cls, text: str) -> WindowBoundaries:
        """Parse ``"0:8,8:256,256:512"``."""
        windows = []
        for part in text.split(","):
            bounds = part.strip().split(":")
            if len(bounds) != 2:
                raise MaskError(f"window {part.strip()!r} is not of the form lo:hi")
            try:
                windows.append((int(bounds[0]), int(bounds[1])))
            except ValueError:
                raise MaskError(f"window {part.strip()!r} has non-integer bounds") from None
        return cls(tuple(windows))

    @property
    def context_length(self) -> int:
        return self.windows[-1][1]

    def __len__(self) -> int:
        return len(self.windows)

    def __str__(self) -> str:
        return ",".join(f"{lo}:{hi}" for lo, hi in self.windows)


def _distances(n: int, k: int) -> np.ndarray:
    """``t - timestamp(j)`` for every query ``t`` and frame ``j``."""
    timestamps = (np.arange(n // k) + 1) * k - 1
    return np.arange(n)[:, None] - timestamps[None, :]


@functools.lru_cache(maxsize=256)
def causal_mask(n: int) -> AttentionMask:
    if n < 1:
        raise MaskError(f"mask length must be positive, got {n}")
    return AttentionMask(np.tril(np.ones((n, n), dtype=bool)))


@functools.lru_cache(maxsize=256)
def local_mask(n: int, w: int) -> AttentionMask:
    """Each query sees itself and the ``w - 1`` positions before it."""
    if n < 1 or w < 1:
        raise MaskError(f"need n >= 1 and w >= 1, got n={n}, w={w}")
    dist = _distances(n, 1)
    return AttentionMask((dist >= 0) & (dist < w))


@functools.lru_cache(maxsize=256)
def cross_scale_mask(n: int, k: int) -> AttentionMask:
    """Token queries over the ``n // k`` frames of factor ``k``; a frame is visible once complete."""
    if n < 1 or k < 1:
        raise MaskError(f"need n >= 1 and k >= 1, got n={n}, k={k}")
    return AttentionMask(_distances(n, k) >= 0, key_scale=k)


@functools.lru_cache(maxsize=64)
def _retina(n: int, scales: tuple[int, ...], windows: tuple[tuple[int, int], ...]) -> tuple[AttentionMask, ...]:
    masks = []
    for k, (lo, hi) in zip(scales, windows):
        dist = _distances(n, k)
        masks.append(AttentionMask((dist >= 0) & (dist >= lo) & (dist < hi), key_scale=k))
    log.debug("built retina masks n=%d scales=%s windows=%s", n, scales, windows)
    return tuple(masks)


def retina_masks(
    n: int, scales: Sequence[int], boundaries: WindowBoundaries
) -> tuple[AttentionMask, ...]:
    """One mask per scale; ``scales`` ascend and pair with ``boundaries`` finest first.

    Frame ``j`` at scale ``k`` is visible from ``t`` when its timestamp is not
    in the future and ``lo <= t - timestamp(j) < hi``. Only the timestamp is
    tested, so a frame straddling a boundary belongs to the scale its last
    position falls in.
    """
    scales = tuple(scales)
    if len(scales) != len(boundaries):
        raise MaskError(f"{len(scales)} scales but {len(boundaries)} windows")
    if any(k < 1 for k in scales) or list(scales) != sorted(set(scales)):
        raise MaskError(f"retina scales must be positive and strictly ascending, got {scales}")
    if n < 1:
        raise MaskError(f"mask length must be positive, got {n}")
    return _retina(n, scales, boundaries.windows)


def verify_mask_causality(mask: AttentionMask, k: int | None = None) -> bool:
    """True iff no allowed key frame has a timestamp after its query."""
    k = mask.key_scale if k is None else k
    timestamps = (np.arange(mask.key_len) + 1) * k - 1
    future = timestamps[None, :] > np.arange(mask.query_len)[:, None]
    return not bool((mask.allowed & future).any())
