"""Finite-difference checks of every differentiable op and of whole tiny models."""

from __future__ import annotations

from typing import TYPE_CHECKING

import numpy as np
import pytest

from mslm import tensor as tc
from mslm.architectures import build_model
from mslm.gradcheck import CASES, check_function, grad_check
from mslm.masks import causal_mask
from mslm.nn import EVAL, AttentionSpec, TransformerLayer
from mslm.tensor import Tensor
from mslm.trainer import model_loss

if TYPE_CHECKING:
    from collections.abc import Callable

    from mslm.config import ModelConfig


@pytest.mark.parametrize("kind", sorted(CASES))
@pytest.mark.parametrize("seed", range(20))
def test_op_gradients(kind: str, seed: int) -> None:
    """Analytic and numeric gradients agree for each op kind on twenty random draws."""
    assert grad_check(kind, seed) < 1e-4


def test_unknown_op_kind() -> None:
    """Asking for an op without a gradient case is an error."""
    with pytest.raises(ValueError, match="no gradient case"):
        grad_check("fft")


def test_transformer_layer_gradients() -> None:
    """A full attention + feedforward layer passes the gradient check."""
    rng = np.random.default_rng(0)
    layer = TransformerLayer(4, 2, 8, 0.0, rng)
    x = Tensor(rng.normal(size=(1, 5, 4)), requires_grad=True)
    spec = AttentionSpec.single(2, causal_mask(5))
    inputs = [x, *layer.parameters()]
    assert check_function(lambda *_: layer(x, spec), inputs, sample=8) < 1e-4


@pytest.mark.parametrize(
    ("family", "fields"),
    [
        ("vanilla", {}),
        ("topdown", {"scales": (4, 1), "layers": (1, 1), "downsampler": "causal_conv"}),
        ("bottomup", {"scales": (4, 1), "layers": (1, 1)}),
        ("retina", {"scales": (4, 1), "retina_windows": "0:4,4:8"}),
        ("coarse", {"scales": (4,)}),
    ],
)
def test_full_model_gradients(
    model_config: Callable[..., ModelConfig], family: str, fields: dict
) -> None:
    """The loss of each tiny model family is differentiated correctly end to end."""
    cfg = model_config(family, context_length=8, **fields)
    model = build_model(cfg, seed=4)
    length = model.chunk_length
    batch = np.random.default_rng(5).integers(0, cfg.vocab_size, size=(2, length))
    error = check_function(lambda *_: model_loss(model, batch, EVAL), model.parameters(), sample=6)
    assert error < 1e-3


def test_check_function_detects_wrong_gradient() -> None:
    """A deliberately wrong backward is caught."""
    x = Tensor([0.5, -1.0, 2.0], requires_grad=True)

    def doubled(a: Tensor) -> Tensor:
        out = tc.mul(a, a)

        def wrong(g: np.ndarray) -> tuple[np.ndarray | None, ...]:
            return (g * a.data,)

        out._backward = wrong
        out.parents = (a,)
        return out

    assert check_function(doubled, [x]) > 0.1
