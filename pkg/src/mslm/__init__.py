"""mslm: multi-scale transformer language models at desk scale.

Vanilla, Top-down, Bottom-up and Retina language models built on a small
reverse-mode autodiff engine, with the masks, analytical cost model, training
loop and evaluation procedures needed to study them.
"""

from __future__ import annotations

import logging
import os

from mslm.errors import (
    CheckpointError,
    CheckpointVersionError,
    ConfigError,
    CorpusError,
    DivisibilityError,
    MaskError,
    MslmError,
    NonFiniteError,
    ScaleError,
    ShapeError,
)

__version__ = "0.1.0"

log = logging.getLogger(__name__)
log.addHandler(logging.NullHandler())
if os.getenv("MSLM_DEBUG"):
    logging.basicConfig(level=logging.DEBUG)

__all__ = [
    "CheckpointError",
    "CheckpointVersionError",
    "ConfigError",
    "CorpusError",
    "DivisibilityError",
    "MaskError",
    "MslmError",
    "NonFiniteError",
    "ScaleError",
    "ShapeError",
]
