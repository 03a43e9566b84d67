"""Run configuration: schema-validated models, canonical JSON and dotted overrides."""

from __future__ import annotations

import json
import logging
import os
from pathlib import Path
from typing import TYPE_CHECKING, Any, Literal

from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from mslm.errors import ConfigError, MaskError
from mslm.masks import WindowBoundaries

if TYPE_CHECKING:
    from collections.abc import Iterable

log = logging.getLogger(__name__)

Family = Literal["vanilla", "topdown", "bottomup", "retina", "coarse"]
MULTI_SCALE: tuple[str, ...] = ("topdown", "bottomup", "retina")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


def _as_tuple(value: Any) -> Any:
    if isinstance(value, int):
        return (value,)
    if isinstance(value, str):
        return tuple(int(v) for v in value.split(",") if v.strip())
    return value


class ModelConfig(_Section):
    """Architecture hyperparameters.

    ``scales`` descend and end at 1 (a coarse-only model has exactly one
    scale, which may be larger than 1). ``layers`` gives one stack depth per
    scale for top-down and bottom-up models, and a single depth otherwise.
    ``head_groups`` lists heads per scale in the order of ``scales``.
    """

    family: Family = "vanilla"
    scales: tuple[int, ...] = (1,)
    layers: tuple[int, ...] = (2,)
    d_model: int = 128
    num_heads: int = 4
    d_ff: int | None = None
    dropout: float = 0.1
    context_length: int = 128
    vocab_size: int = 10000
    downsampler: Literal["avg_pool", "max_pool", "causal_conv"] = "avg_pool"
    upsample_activation: bool = False
    retina_windows: str | None = None
    head_groups: tuple[int, ...] | None = None
    attention_window: int | None = None
    tie_embeddings: bool = False

    @field_validator("scales", "layers", "head_groups", mode="before")
    @classmethod
    def coerce_sequences(cls, value: Any) -> Any:
        return _as_tuple(value)

    @model_validator(mode="after")
    def check_consistency(self) -> ModelConfig:
        if self.d_model < 1 or self.num_heads < 1 or self.d_model % self.num_heads:
            raise ConfigError("model.d_model", f"{self.d_model} is not divisible by {self.num_heads} heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("model.dropout", f"must be in [0, 1), got {self.dropout}")
        if self.vocab_size < 3:
            raise ConfigError("model.vocab_size", "needs room for <unk>, <bos> and one word")
        scales = self.scales
        if not scales or any(k < 1 for k in scales):
            raise ConfigError("model.scales", f"scales must be positive, got {scales}")
        if self.family == "coarse":
            if len(scales) != 1:
                raise ConfigError("model.scales", "a coarse-only model has exactly one scale")
        else:
            if scales[-1] != 1:
                raise ConfigError("model.scales", f"the finest scale must be 1, got {scales}")
            for coarse, fine in zip(scales, scales[1:]):
                if coarse <= fine or coarse % fine:
                    raise ConfigError(
                        "model.scales", f"scales must descend by integer ratios, got {scales}"
                    )
        if self.family == "vanilla" and scales != (1,):
            raise ConfigError("model.scales", "a vanilla model has the single scale 1")
        depth_per_scale = self.family in ("topdown", "bottomup")
        expected = len(scales) if depth_per_scale else 1
        if len(self.layers) != expected or any(n < 0 for n in self.layers):
            raise ConfigError("model.layers", f"expected {expected} non-negative depth(s), got {self.layers}")
        if self.context_length < 1 or self.context_length % scales[0]:
            raise ConfigError(
                "model.context_length",
                f"{self.context_length} is not divisible by the coarsest scale {scales[0]}",
            )
        if self.family == "topdown" and self.context_length < 2 * scales[0]:
            raise ConfigError(
                "model.context_length",
                f"a top-down model needs at least two frames of {scales[0]} tokens, got {self.context_length}",
            )
        if self.attention_window is not None and (self.family != "vanilla" or self.attention_window < 1):
            raise ConfigError("model.attention_window", "only a vanilla model takes a positive attention window")
        if self.family == "retina":
            try:
                boundaries = self.windows()
            except MaskError as exc:
                raise ConfigError("model.retina_windows", str(exc)) from None
            if len(boundaries) != len(scales):
                raise ConfigError(
                    "model.retina_windows", f"{len(boundaries)} windows for {len(scales)} scales"
                )
        elif self.retina_windows is not None:
            raise ConfigError("model.retina_windows", "only a retina model takes windows")
        if self.head_groups is not None:
            if self.family not in ("bottomup", "retina"):
                raise ConfigError("model.head_groups", "only bottom-up and retina models split heads")
            if len(self.head_groups) != len(scales) or any(h < 1 for h in self.head_groups):
                raise ConfigError("model.head_groups", f"need one positive count per scale, got {self.head_groups}")
            if sum(self.head_groups) != self.num_heads:
                raise ConfigError("model.head_groups", f"counts sum to {sum(self.head_groups)}, not {self.num_heads}")
        elif self.family in ("bottomup", "retina") and self.num_heads < len(scales):
            raise ConfigError("model.num_heads", f"{self.num_heads} heads cannot cover {len(scales)} scales")
        return self

    @property
    def ff_width(self) -> int:
        return 4 * self.d_model if self.d_ff is None else self.d_ff

    @property
    def coarsest(self) -> int:
        return self.scales[0]

    def windows(self) -> WindowBoundaries:
        """Retina windows, finest first; a single-scale retina defaults to the full context."""
        if self.retina_windows is None:
            if len(self.scales) == 1:
                return WindowBoundaries(((0, self.context_length),))
            raise MaskError("a multi-scale retina model needs retina_windows")
        return WindowBoundaries.parse(self.retina_windows)

    def heads_per_scale(self) -> dict[int, int]:
        """Heads given to each scale.

        Without explicit ``head_groups`` every coarse scale gets
        ``num_heads // m`` heads and scale 1 keeps the remainder.
        """
        if self.head_groups is not None:
            return dict(zip(self.scales, self.head_groups))
        share = self.num_heads // len(self.scales)
        alloc = {k: share for k in self.scales[:-1]}
        alloc[self.scales[-1]] = self.num_heads - share * (len(self.scales) - 1)
        return alloc

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))


class TrainConfig(_Section):
    steps: int = 20000
    warmup: int = 200
    peak_lr: float = 3e-4
    batch_size: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = None
    accumulate_steps: int = 1
    checkpoint_every: int = 1000
    valid_every: int = 500
    log_every: int = 50
    dtype: Literal["float32", "float64"] = "float32"

    @model_validator(mode="after")
    def check_consistency(self) -> TrainConfig:
        if not 0 < self.warmup < self.steps:
            raise ConfigError("train.warmup", f"need 0 < warmup < steps, got {self.warmup} and {self.steps}")
        if self.batch_size < 1 or self.accumulate_steps < 1:
            raise ConfigError("train.batch_size", "batch size and accumulation steps must be positive")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("train.clip_norm", f"must be positive, got {self.clip_norm}")
        return self


class DataConfig(_Section):
    train: str | None = None
    valid: str | None = None
    test: str | None = None
    lowercase: bool = False

    def require(self, split: Literal["train", "valid", "test"]) -> Path:
        """Path of a split that must exist on disk."""
        value = getattr(self, split)
        if value is None:
            raise ConfigError(f"data.{split}", "no corpus path configured")
        path = Path(value)
        if not path.is_file():
            raise ConfigError(f"data.{split}", f"corpus file {value} does not exist")
        return path


class EvalConfig(_Section):
    context: int | None = None
    stride: int | None = None


class AnalysisConfig(_Section):
    top_k: int = 40
    temperature: float = 0.7
    sample_context: int = 64
    sample_length: int = 64
    num_samples: int = 3
    suppress_unk: bool = True
    perturb_context: int = 64
    nbins: int = 5
    nn_chunk: int | None = None
    nn_top_n: int = 5

    @model_validator(mode="after")
    def check_consistency(self) -> AnalysisConfig:
        if self.top_k < 1:
            raise ConfigError("analysis.top_k", f"must be at least 1, got {self.top_k}")
        if self.temperature < 0:
            raise ConfigError("analysis.temperature", "must be non-negative")
        return self


class RunConfig(_Section):
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    data: DataConfig = DataConfig()
    eval: EvalConfig = EvalConfig()
    analysis: AnalysisConfig = AnalysisConfig()
    seed: int = 0

    @model_validator(mode="after")
    def check_consistency(self) -> RunConfig:
        context, stride = self.eval_window()
        if context > self.model.context_length:
            raise ConfigError("eval.context", f"{context} exceeds model.context_length {self.model.context_length}")
        topdown = self.model.family == "topdown"
        if topdown and context % self.model.coarsest:
            raise ConfigError("eval.context", f"{context} is not divisible by the coarsest scale {self.model.coarsest}")
        # Top-down windows hold the context; the others hold the context plus one target
        limit = context - self.model.coarsest if topdown else context
        if not 1 <= stride <= limit:
            raise ConfigError("eval.stride", f"stride {stride} does not fit a window of {context}")
        self.check_chunk("analysis.nn_chunk", self.neighbour_chunk())
        return self

    def chunk_range(self) -> tuple[int, int]:
        """Shortest and longest neighbour chunk; a chunk is one whole model input."""
        shortest = 2 * self.model.coarsest if self.model.family == "topdown" else 2
        longest = self.model.context_length + (0 if self.model.family in ("topdown", "coarse") else 1)
        return shortest, longest

    def check_chunk(self, key: str, chunk: int) -> int:
        shortest, longest = self.chunk_range()
        if not shortest <= chunk <= longest:
            raise ConfigError(key, f"chunks must hold {shortest} to {longest} tokens, got {chunk}")
        return chunk

    def neighbour_chunk(self) -> int:
        """Tokens per neighbour chunk: ``analysis.nn_chunk``, else 16 moved into the allowed range."""
        if self.analysis.nn_chunk is not None:
            return self.analysis.nn_chunk
        shortest, longest = self.chunk_range()
        return max(shortest, min(16, longest))

    def eval_window(self) -> tuple[int, int]:
        """Evaluation context and stride, defaulting to the training context and half of it."""
        context = self.eval.context or self.model.context_length
        return context, self.eval.stride or max(1, context // 2)


def canonical_json(config: BaseModel) -> str:
    """Sorted-key, indented JSON of a config; identical configs give identical bytes."""
    return json.dumps(config.model_dump(mode="json"), sort_keys=True, indent=2) + "\n"


def parse_value(text: str) -> Any:
    """JSON if it parses, else a comma-separated int list, else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    parts = text.split(",")
    if len(parts) > 1:
        try:
            return [int(p) for p in parts]
        except ValueError:
            pass
    return text


def apply_overrides(raw: dict[str, Any], overrides: Iterable[str]) -> dict[str, Any]:
    """Apply ``section.key=value`` assignments to a raw config mapping in place."""
    for item in overrides:
        key, sep, text = item.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(key or item, "override must look like section.key=value")
        *path, leaf = key.split(".")
        node = raw
        for part in path:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(key, f"{part} is not a section")
            node = child
        node[leaf] = parse_value(text.strip())
        log.debug("override %s = %r", key, node[leaf])
    return raw


def describe_validation(exc: ValidationError) -> ConfigError:
    """Turn the first validation failure into a :class:`ConfigError` naming its dotted key."""
    for error in exc.errors():
        inner = (error.get("ctx") or {}).get("error")
        if isinstance(inner, ConfigError):
            return inner
        if error["loc"]:
            return ConfigError(".".join(str(p) for p in error["loc"]), error["msg"])
    return ConfigError("config", str(exc))


def load_config(path: str | os.PathLike[str] | None = None, overrides: Iterable[str] = ()) -> RunConfig:
    """Read a JSON run config (or start from defaults) and apply overrides.

    Raises:
        ConfigError: If the file is missing or unparsable, or validation fails
    """
    raw: dict[str, Any] = {}
    if path is not None:
        file = Path(path)
        if not file.is_file():
            raise ConfigError("config", f"config file {file} does not exist")
        try:
            raw = json.loads(file.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"{file} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config", f"{file} must hold a JSON object")
    apply_overrides(raw, overrides)
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise describe_validation(exc) from exc


def reference_config() -> str:
    """Every key with its default value."""
    return canonical_json(RunConfig())
