"""Binary checkpoint format.

Layout, all integers little-endian::

    b"MSLM" | u32 version
    u32 length | ModelConfig as canonical JSON
    u32 length | run state as JSON (step, generator states, vocabulary)
    u32 count  | count x (u16 name length, name, u8 dtype tag, u8 ndim, ndim x u32 dims, data)
"""

from __future__ import annotations

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, BinaryIO

import numpy as np
from pydantic import ValidationError

from mslm.architectures import build_model
from mslm.config import ModelConfig
from mslm.errors import CheckpointError, CheckpointVersionError

if TYPE_CHECKING:
    from collections.abc import Mapping

    from mslm.architectures import LanguageModel

log = logging.getLogger(__name__)

MAGIC = b"MSLM"
FORMAT_VERSION = 1

_DTYPES: dict[int, np.dtype] = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<i8"),
}
_TAGS = {dtype: tag for tag, dtype in _DTYPES.items()}


@dataclass
class Checkpoint:
    config: ModelConfig
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    state: dict[str, Any] = field(default_factory=dict)

    def prefixed(self, prefix: str) -> dict[str, np.ndarray]:
        """Arrays whose names start with ``prefix``, with the prefix removed."""
        return {name[len(prefix) :]: a for name, a in self.arrays.items() if name.startswith(prefix)}


def _write_blob(out: BinaryIO, data: bytes) -> None:
    out.write(struct.pack("<I", len(data)))
    out.write(data)


def _read_exact(src: BinaryIO, size: int, what: str) -> bytes:
    data = src.read(size)
    if len(data) != size:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def _read_blob(src: BinaryIO, what: str) -> bytes:
    (size,) = struct.unpack("<I", _read_exact(src, 4, what))
    return _read_exact(src, size, what)


def write_checkpoint(path: str | os.PathLike[str], checkpoint: Checkpoint) -> Path:
    """Write ``checkpoint`` atomically (temporary file, then rename)."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = target.with_name(target.name + ".tmp")
    try:
        with tmp.open("wb") as out:
            out.write(MAGIC)
            out.write(struct.pack("<I", FORMAT_VERSION))
            _write_blob(out, checkpoint.config.canonical_json().encode("utf-8"))
            _write_blob(out, json.dumps(checkpoint.state, sort_keys=True).encode("utf-8"))
            out.write(struct.pack("<I", len(checkpoint.arrays)))
            for name, array in checkpoint.arrays.items():
                array = np.asarray(array)
                dtype = array.dtype.newbyteorder("<")
                if dtype not in _TAGS:
                    raise CheckpointError(f"array {name} has unsupported dtype {array.dtype}")
                encoded = name.encode("utf-8")
                out.write(struct.pack("<H", len(encoded)))
                out.write(encoded)
                out.write(struct.pack("<BB", _TAGS[dtype], array.ndim))
                out.write(struct.pack(f"<{array.ndim}I", *array.shape))
                out.write(np.ascontiguousarray(array, dtype=dtype).tobytes())
        tmp.replace(target)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {target}: {exc}") from exc
    log.info("wrote checkpoint %s (%d arrays)", target, len(checkpoint.arrays))
    return target


def read_checkpoint(path: str | os.PathLike[str]) -> Checkpoint:
    """Parse a checkpoint file.

    Raises:
        CheckpointVersionError: If the file was written by another format version
        CheckpointError: If the file is missing, truncated or malformed
    """
    source = Path(path)
    try:
        src = source.open("rb")
    except OSError as exc:
        raise CheckpointError(f"cannot open checkpoint {source}: {exc}") from exc
    with src:
        if _read_exact(src, 4, "magic") != MAGIC:
            raise CheckpointError(f"{source} is not an MSLM checkpoint")
        (version,) = struct.unpack("<I", _read_exact(src, 4, "version"))
        if version != FORMAT_VERSION:
            raise CheckpointVersionError(version, FORMAT_VERSION)
        try:
            config = ModelConfig.model_validate_json(_read_blob(src, "model config"))
            state = json.loads(_read_blob(src, "run state"))
        except (ValidationError, ValueError) as exc:
            raise CheckpointError(f"{source} has a malformed header: {exc}") from exc
        (count,) = struct.unpack("<I", _read_exact(src, 4, "array count"))
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(src, 2, "array name"))
            name = _read_exact(src, name_len, "array name").decode("utf-8")
            tag, ndim = struct.unpack("<BB", _read_exact(src, 2, name))
            if tag not in _DTYPES:
                raise CheckpointError(f"array {name} has unknown dtype tag {tag}")
            shape = struct.unpack(f"<{ndim}I", _read_exact(src, 4 * ndim, name))
            dtype = _DTYPES[tag]
            size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            data = np.frombuffer(_read_exact(src, size, name), dtype=dtype).reshape(shape)
            arrays[name] = data.astype(dtype.newbyteorder("="))
    return Checkpoint(config, arrays, state)


def model_checkpoint(
    model: LanguageModel,
    state: Mapping[str, Any] | None = None,
    extra: Mapping[str, np.ndarray] | None = None,
) -> Checkpoint:
    """Checkpoint of a model's parameters plus optional run state and extra arrays."""
    arrays = {f"param.{name}": value for name, value in model.state_dict().items()}
    arrays.update(extra or {})
    return Checkpoint(model.config, arrays, dict(state or {}))


def load_model(path: str | os.PathLike[str]) -> tuple[LanguageModel, Checkpoint]:
    """Rebuild the model stored in a checkpoint."""
    checkpoint = read_checkpoint(path)
    model = build_model(checkpoint.config)
    try:
        model.load_state_dict(checkpoint.prefixed("param."))
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: parameters do not match the stored config: {exc}") from exc
    return model, checkpoint
