"""Tests for downsampling, upsampling and fusion."""

from __future__ import annotations

import numpy as np
import pytest

from mslm import tensor as tc
from mslm.errors import DivisibilityError, ShapeError
from mslm.scale_ops import Downsampler, Fusion, Upsampler, downsample, frame_timestamp, fuse, upsample
from mslm.tensor import Tensor


def test_frame_timestamp() -> None:
    """A frame's timestamp is the last position it covers."""
    assert frame_timestamp(0, 4) == 3
    assert frame_timestamp(2, 16) == 47
    np.testing.assert_array_equal(frame_timestamp(np.arange(3), 2), [1, 3, 5])


def test_strict_downsample_needs_divisible_length() -> None:
    """A length that the factor does not divide raises in strict mode."""
    x = Tensor(np.zeros((1, 6, 2)))
    with pytest.raises(DivisibilityError) as info:
        downsample(x, Downsampler("avg_pool", 4, 2))
    assert (info.value.length, info.value.factor) == (6, 4)
    assert downsample(x, Downsampler("avg_pool", 4, 2), strict=False).shape == (1, 1, 2)


def test_factor_one_is_identity() -> None:
    """Downsampling by one returns the input unchanged."""
    x = Tensor(np.ones((1, 3, 2)))
    assert downsample(x, Downsampler("causal_conv", 1, 2)) is x


@pytest.mark.parametrize(("method", "expected"), [("avg_pool", [1.5, 5.5]), ("max_pool", [3.0, 7.0])])
def test_pooling_values(method: str, expected: list[float]) -> None:
    """Pooling summarises each frame of four positions."""
    x = Tensor(np.arange(8, dtype=float).reshape(1, 8, 1))
    out = downsample(x, Downsampler(method, 4, 1))  # type: ignore[arg-type]
    np.testing.assert_array_equal(out.data[0, :, 0], expected)


@pytest.mark.parametrize("method", ["avg_pool", "max_pool", "causal_conv"])
def test_downsampled_frame_reads_only_its_positions(method: str) -> None:
    """Changing a position changes only the frame covering it."""
    rng = np.random.default_rng(0)
    down = Downsampler(method, 4, 3, rng)  # type: ignore[arg-type]
    data = rng.normal(size=(1, 16, 3))
    before = downsample(Tensor(data), down).data
    data[0, 9] += 5.0
    after = downsample(Tensor(data), down).data
    changed = (before != after).any(axis=-1)[0]
    assert changed.tolist() == [False, False, True, False]


def test_unknown_method() -> None:
    """Only the three downsampling methods are accepted."""
    with pytest.raises(ValueError, match="unknown downsampling method"):
        Downsampler("strided", 2, 4)  # type: ignore[arg-type]


def test_causal_conv_owns_parameters() -> None:
    """A learned downsampler has a (k*D, D) kernel and a bias."""
    down = Downsampler("causal_conv", 4, 3, np.random.default_rng(0))
    assert [p.shape for p in down.parameters()] == [(12, 3), (3,)]
    assert Downsampler("avg_pool", 4, 3).parameters() == []


@pytest.mark.parametrize("activation", [False, True])
def test_upsample_expands_frames(activation: bool) -> None:
    """Each frame becomes r positions that depend on that frame only."""
    rng = np.random.default_rng(1)
    up = Upsampler(4, 3, rng, activation=activation)
    h = rng.normal(size=(1, 2, 3))
    before = upsample(Tensor(h), up).data
    h[0, 0] += 1.0
    after = up(Tensor(h)).data
    assert before.shape == (1, 8, 3)
    changed = (before != after).any(axis=-1)[0]
    assert changed.tolist() == [True] * 4 + [False] * 4


def test_fusion_shapes() -> None:
    """Fusion maps two (B, T, D) inputs to one and rejects mismatched inputs."""
    rng = np.random.default_rng(2)
    f = Fusion(3, rng)
    a, b = Tensor(rng.normal(size=(1, 4, 3))), Tensor(rng.normal(size=(1, 4, 3)))
    assert fuse(a, b, f).shape == (1, 4, 3)
    with pytest.raises(ShapeError, match="fuse"):
        f(a, Tensor(np.zeros((1, 2, 3))))


def test_avg_pool_is_linear() -> None:
    """Average pooling commutes with linear combinations of its inputs."""
    rng = np.random.default_rng(3)
    down = Downsampler("avg_pool", 4, 3)
    x, y = rng.normal(size=(2, 8, 3)), rng.normal(size=(2, 8, 3))
    combined = down(Tensor(2.5 * x - 0.5 * y)).data
    expected = 2.5 * down(Tensor(x)).data - 0.5 * down(Tensor(y)).data
    np.testing.assert_allclose(combined, expected, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("method", ["avg_pool", "max_pool"])
def test_pooling_composes(method: str) -> None:
    """Pooling by k then by r equals pooling once by k * r."""
    x = Tensor(np.random.default_rng(4).normal(size=(1, 16, 3)))
    twice = Downsampler(method, 2, 3)(Downsampler(method, 4, 3)(x))  # type: ignore[arg-type]
    once = Downsampler(method, 8, 3)(x)  # type: ignore[arg-type]
    np.testing.assert_allclose(twice.data, once.data, rtol=1e-12, atol=1e-12)


def test_fusion_can_select_its_first_input() -> None:
    """With projection [I | 0] and no bias, fusion is gelu of the first input alone."""
    rng = np.random.default_rng(5)
    f = Fusion(3, rng)
    f.weight.data[...] = np.vstack([np.eye(3), np.zeros((3, 3))])
    a = Tensor(rng.normal(size=(1, 4, 3)))
    expected = tc.gelu(a).data
    np.testing.assert_array_equal(fuse(a, Tensor(rng.normal(size=(1, 4, 3))), f).data, expected)
    np.testing.assert_array_equal(fuse(a, Tensor(np.zeros((1, 4, 3))), f).data, expected)


def test_identity_kernel_repeats_frames() -> None:
    """An upsampler whose kernel taps are all the identity copies each frame r times."""
    rng = np.random.default_rng(6)
    up = Upsampler(4, 3, rng)
    up.weight.data[...] = np.tile(np.eye(3), (1, 4))
    h = rng.normal(size=(2, 3, 3))
    np.testing.assert_array_equal(up(Tensor(h)).data, np.repeat(h, 4, axis=1))
