"""Common test fixtures."""

from __future__ import annotations

from pathlib import Path
from typing import TYPE_CHECKING, Any

import pytest

from mslm import tensor as tc
from mslm.config import ModelConfig

if TYPE_CHECKING:
    from collections.abc import Callable, Iterator

CASES = Path(__file__).parent / "cases"


@pytest.fixture(autouse=True)
def exact_float64() -> Iterator[None]:
    """Pin float64 with fixed-order reductions, then restore the run-level settings."""
    with tc.runtime(dtype="float64", exact=True):
        yield


@pytest.fixture
def model_config() -> Callable[..., ModelConfig]:
    """Factory for tiny model configs; keyword arguments override the defaults."""

    def build(family: str = "vanilla", **fields: Any) -> ModelConfig:
        values: dict[str, Any] = {
            "family": family,
            "d_model": 8,
            "num_heads": 2,
            "context_length": 16,
            "vocab_size": 11,
            "dropout": 0.0,
            "layers": (1,),
        }
        values.update(fields)
        return ModelConfig(**values)

    return build


@pytest.fixture
def cases() -> Path:
    return CASES
