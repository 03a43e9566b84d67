"""Tests for run configuration loading, validation and overrides."""

from __future__ import annotations

import json
from typing import TYPE_CHECKING

import pytest
from pydantic import ValidationError

from mslm.config import (
    ModelConfig,
    RunConfig,
    apply_overrides,
    canonical_json,
    load_config,
    parse_value,
    reference_config,
)
from mslm.errors import ConfigError

if TYPE_CHECKING:
    from pathlib import Path


def test_defaults() -> None:
    """A config with no file and no overrides is the default run."""
    cfg = load_config()
    assert cfg == RunConfig()
    assert cfg.model.family == "vanilla"
    assert cfg.model.scales == (1,)
    assert cfg.model.ff_width == 4 * cfg.model.d_model
    assert cfg.eval_window() == (cfg.model.context_length, cfg.model.context_length // 2)


def test_reference_lists_every_section() -> None:
    """The reference config is canonical JSON of all sections."""
    data = json.loads(reference_config())
    assert set(data) == {"model", "train", "data", "eval", "analysis", "seed"}
    assert data["model"]["downsampler"] == "avg_pool"
    assert reference_config() == reference_config()


def test_unknown_key_is_named(tmp_path: Path) -> None:
    """A typo in a config file names the dotted key."""
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"model": {"foo": 1}}), encoding="utf-8")
    with pytest.raises(ConfigError) as info:
        load_config(path)
    assert info.value.key == "model.foo"


def test_validator_errors_keep_their_key() -> None:
    """Cross-field failures surface with the key of the offending field."""
    with pytest.raises(ConfigError) as info:
        load_config(overrides=["model.d_model=10", "model.num_heads=4"])
    assert info.value.key == "model.d_model"


def test_overrides_parse_values() -> None:
    """Overrides accept JSON, comma lists and bare strings."""
    cfg = load_config(
        overrides=[
            "model.family=topdown",
            "model.scales=16,4,1",
            "model.layers=[1,1,2]",
            "model.downsampler=max_pool",
            "train.dtype=float64",
            "seed=9",
        ]
    )
    assert cfg.model.scales == (16, 4, 1)
    assert cfg.model.layers == (1, 1, 2)
    assert cfg.model.downsampler == "max_pool"
    assert cfg.train.dtype == "float64"
    assert cfg.seed == 9


@pytest.mark.parametrize(
    ("text", "expected"),
    [("3", 3), ("0.5", 0.5), ("true", True), ("16,4,1", [16, 4, 1]), ("avg_pool", "avg_pool"), ("a,b", "a,b")],
)
def test_parse_value(text: str, expected: object) -> None:
    """Values are typed by JSON first, then int lists, then kept as text."""
    assert parse_value(text) == expected


def test_malformed_override() -> None:
    """An override without ``=`` is rejected."""
    with pytest.raises(ConfigError, match="section.key=value"):
        apply_overrides({}, ["model.family"])
    with pytest.raises(ConfigError, match="not a section"):
        apply_overrides({"seed": 1}, ["seed.x=2"])


def test_scale_rules() -> None:
    """Scales descend by integer ratios and end at one."""
    for scales in ("4,2,3", "4,2", "2,4,1", "6,4,1"):
        with pytest.raises(ConfigError) as info:
            load_config(overrides=["model.family=bottomup", f"model.scales={scales}", "model.layers=1,1,1"])
        assert info.value.key in ("model.scales", "model.layers")
    with pytest.raises(ConfigError, match="single scale"):
        load_config(overrides=["model.scales=4,1"])


def test_layers_per_family() -> None:
    """Top-down and bottom-up models take one depth per scale, retina one overall."""
    with pytest.raises(ConfigError) as info:
        load_config(overrides=["model.family=topdown", "model.scales=4,1", "model.layers=2"])
    assert info.value.key == "model.layers"
    cfg = load_config(
        overrides=["model.family=retina", "model.scales=4,1", "model.layers=2", "model.retina_windows=\"0:8,8:128\""]
    )
    assert cfg.model.windows().windows == ((0, 8), (8, 128))


def test_context_must_hold_coarsest_frames() -> None:
    """The context length is a multiple of the coarsest scale."""
    with pytest.raises(ConfigError) as info:
        load_config(overrides=["model.family=topdown", "model.scales=16,1", "model.layers=1,1", "model.context_length=24"])
    assert info.value.key == "model.context_length"


def test_head_groups() -> None:
    """Explicit head groups must sum to the head count."""
    fields = {"family": "bottomup", "scales": (4, 1), "layers": (1, 1), "num_heads": 4}
    assert ModelConfig(**fields, head_groups=(1, 3)).heads_per_scale() == {4: 1, 1: 3}
    with pytest.raises(ValidationError, match="sum to 3"):
        ModelConfig(**fields, head_groups=(1, 2))
    with pytest.raises(ValidationError, match="only bottom-up and retina"):
        ModelConfig(family="vanilla", head_groups=(4,))


def test_default_head_allocation() -> None:
    """Coarse scales get an equal floor share and scale one keeps the rest."""
    cfg = ModelConfig(family="retina", scales=(16, 4, 1), num_heads=8, d_model=64, retina_windows="0:8,8:32,32:128")
    assert cfg.heads_per_scale() == {16: 2, 4: 2, 1: 4}
    cfg = ModelConfig(family="bottomup", scales=(4, 1), layers=(1, 1), num_heads=4)
    assert cfg.heads_per_scale() == {4: 2, 1: 2}


def test_retina_window_validation() -> None:
    """Overlapping windows and a window count off by one are rejected."""
    base = {"family": "retina", "scales": (4, 1)}
    with pytest.raises(ValidationError, match="non-overlapping"):
        ModelConfig(**base, retina_windows="0:8,4:128")
    with pytest.raises(ValidationError, match="3 windows for 2 scales"):
        ModelConfig(**base, retina_windows="0:8,8:64,64:128")
    with pytest.raises(ValidationError, match="needs retina_windows"):
        ModelConfig(**base)
    assert ModelConfig(family="retina").windows().windows == ((0, 128),)


def test_canonical_round_trip(tmp_path: Path) -> None:
    """Writing a config as canonical JSON and reading it back gives the same config and bytes."""
    cfg = load_config(overrides=["model.family=topdown", "model.scales=4,1", "model.layers=1,2", "seed=5"])
    path = tmp_path / "echo.json"
    path.write_text(canonical_json(cfg), encoding="utf-8")
    again = load_config(path)
    assert again == cfg
    assert canonical_json(again) == path.read_text(encoding="utf-8")
    assert cfg.model.canonical_json() == again.model.canonical_json()


def test_missing_and_invalid_files(tmp_path: Path) -> None:
    """A missing or unparsable config file is a ConfigError keyed ``config``."""
    with pytest.raises(ConfigError) as info:
        load_config(tmp_path / "absent.json")
    assert info.value.key == "config"
    bad = tmp_path / "bad.json"
    bad.write_text("{", encoding="utf-8")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config(bad)


def test_topdown_eval_stride_limit() -> None:
    """Top-down windows leave room for one coarsest frame of targets."""
    overrides = ["model.family=topdown", "model.scales=16,1", "model.layers=1,1", "eval.context=64"]
    assert load_config(overrides=[*overrides, "eval.stride=48"]).eval_window() == (64, 48)
    with pytest.raises(ConfigError) as info:
        load_config(overrides=[*overrides, "eval.stride=56"])
    assert info.value.key == "eval.stride"
    assert load_config(overrides=["eval.context=64", "eval.stride=64"]).eval_window() == (64, 64)


def test_eval_context_bounded_by_model() -> None:
    """Evaluation cannot use a longer context than the model was built with."""
    with pytest.raises(ConfigError) as info:
        load_config(overrides=["eval.context=256"])
    assert info.value.key == "eval.context"


def test_topdown_eval_context_divides_into_frames() -> None:
    """A top-down evaluation context is a whole number of coarsest frames."""
    overrides = ["model.family=topdown", "model.scales=16,1", "model.layers=1,1"]
    with pytest.raises(ConfigError) as info:
        load_config(overrides=[*overrides, "eval.context=48", "eval.stride=16"])
    assert info.value.key == "eval.context"
    assert "coarsest scale 16" in str(info.value)
    assert load_config(overrides=[*overrides, "eval.context=64", "eval.stride=16"]).eval_window() == (64, 16)


def test_topdown_context_holds_two_frames() -> None:
    """A top-down model reads at least two coarsest frames."""
    with pytest.raises(ValidationError, match="two frames"):
        ModelConfig(family="topdown", scales=(16, 1), layers=(1, 1), context_length=16)
    assert ModelConfig(family="topdown", scales=(16, 1), layers=(1, 1), context_length=32).context_length == 32


def test_neighbour_chunk_fits_the_model() -> None:
    """Neighbour chunks default into the range a model reads; explicit values outside it are rejected."""
    topdown = ["model.family=topdown", "model.scales=16,1", "model.layers=1,1"]
    assert load_config(overrides=topdown).neighbour_chunk() == 32
    assert load_config().neighbour_chunk() == 16
    assert load_config(overrides=["model.context_length=8"]).neighbour_chunk() == 9
    with pytest.raises(ConfigError) as info:
        load_config(overrides=[*topdown, "analysis.nn_chunk=16"])
    assert info.value.key == "analysis.nn_chunk"
    with pytest.raises(ConfigError, match="2 to 129"):
        load_config(overrides=["analysis.nn_chunk=1"])
    assert load_config(overrides=["analysis.nn_chunk=129"]).neighbour_chunk() == 129


def test_train_warmup_bounds() -> None:
    """Warmup lies strictly between zero and the step count."""
    with pytest.raises(ConfigError) as info:
        load_config(overrides=["train.steps=10", "train.warmup=10"])
    assert info.value.key == "train.warmup"


def test_data_require(tmp_path: Path) -> None:
    """A required split must be configured and exist."""
    cfg = load_config()
    with pytest.raises(ConfigError) as info:
        cfg.data.require("train")
    assert info.value.key == "data.train"
    corpus = tmp_path / "train.txt"
    corpus.write_text("a b c\n", encoding="utf-8")
    cfg = load_config(overrides=[f"data.train={corpus}"])
    assert cfg.data.require("train") == corpus
    with pytest.raises(ConfigError, match="does not exist"):
        load_config(overrides=[f"data.valid={tmp_path / 'missing.txt'}"]).data.require("valid")
