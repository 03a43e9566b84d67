"""End-to-end tests of the ``mslm`` command line on a tiny corpus."""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path
from typing import TYPE_CHECKING

import pytest

from mslm.checkpoint import FORMAT_VERSION
from mslm.cli import main
from mslm.masks import WindowBoundaries, causal_mask, local_mask, retina_masks

if TYPE_CHECKING:
    from collections.abc import Sequence

CASES = Path(__file__).parent / "cases"
TINY = str(CASES / "tiny_run.json")
DATA = [f"data.{split}={CASES / f'{split}.txt'}" for split in ("train", "valid", "test")]


def read_rows(path: Path) -> list[dict[str, str]]:
    with path.open(newline="", encoding="utf-8") as src:
        return list(csv.DictReader(src))


def run(*argv: str, out: Path | None = None, extra: Sequence[str] = DATA) -> int:
    args = [*argv, "--config", TINY, *extra]
    if out is not None:
        args += ["--out", str(out)]
    return main(args)


@pytest.fixture(scope="module")
def trained(tmp_path_factory: pytest.TempPathFactory) -> Path:
    """Output directory of a four-step training run."""
    out = tmp_path_factory.mktemp("run")
    assert run("train", "--seed", "5", out=out) == 0
    return out


def test_train_outputs(trained: Path) -> None:
    """Training writes the config echo, the vocabulary, metrics and checkpoints."""
    echo = json.loads((trained / "config_echo.json").read_text(encoding="utf-8"))
    assert echo["seed"] == 5
    assert echo["model"]["family"] == "vanilla"
    assert (trained / "vocab.json").is_file()
    rows = read_rows(trained / "metrics.csv")
    assert [row["step"] for row in rows] == ["1", "2", "3", "4"]
    assert rows[1]["valid_ppl"] != ""
    assert (trained / "checkpoints" / "last.mslm").is_file()


def test_eval_is_reproducible(trained: Path, tmp_path: Path) -> None:
    """Two evaluations of the same checkpoint write byte-identical results."""
    checkpoint = str(trained / "checkpoints" / "last.mslm")
    outputs = []
    for name in ("a", "b"):
        assert run("eval", "--checkpoint", checkpoint, out=tmp_path / name) == 0
        outputs.append((tmp_path / name / "analysis" / "eval.csv").read_bytes())
    assert outputs[0] == outputs[1]
    (row,) = read_rows(tmp_path / "a" / "analysis" / "eval.csv")
    assert (row["split"], row["context"], row["stride"]) == ("test", "16", "8")
    assert float(row["token_ppl"]) > 1.0
    assert int(row["targets"]) > int(row["words"]) > 0


def test_identity_perturbation_is_zero(trained: Path, tmp_path: Path) -> None:
    """Without shuffling, every distance bucket reports no change."""
    checkpoint = str(trained / "checkpoints" / "last.mslm")
    assert run("perturb", "--checkpoint", checkpoint, "--identity-permutation", out=tmp_path) == 0
    rows = read_rows(tmp_path / "analysis" / "perturbation.csv")
    assert rows
    assert all(float(row["mean_delta_nll"]) == 0.0 for row in rows)
    assert rows[-1]["distance_hi"] == "8"


def test_analysis_commands_write_their_files(trained: Path, tmp_path: Path) -> None:
    """Sampling, neighbours and frequency bins land in the output directory."""
    checkpoint = str(trained / "checkpoints" / "last.mslm")
    assert run("sample", "--checkpoint", checkpoint, "--prompts", "2", out=tmp_path) == 0
    assert run("nn", "--checkpoint", checkpoint, out=tmp_path) == 0
    assert run("freq", "--checkpoint", checkpoint, out=tmp_path) == 0
    text = (tmp_path / "samples" / "samples.txt").read_text(encoding="utf-8")
    assert text.count("# prompt ") == 2 * 2
    metrics = read_rows(tmp_path / "analysis" / "sample_metrics.csv")
    assert [row["prompt"] for row in metrics] == ["0", "1"]
    neighbours = read_rows(tmp_path / "analysis" / "neighbors_k1.csv")
    assert [row["rank"] for row in neighbours] == ["1", "2", "3"]
    assert neighbours[0]["chunk"] == "0"
    bins = read_rows(tmp_path / "analysis" / "frequency.csv")
    assert [row["bin"] for row in bins] == ["0", "1", "2"]


def test_sample_is_seeded(trained: Path, tmp_path: Path) -> None:
    """The same seed gives the same samples."""
    checkpoint = str(trained / "checkpoints" / "last.mslm")
    texts = []
    for name in ("a", "b"):
        assert run("sample", "--checkpoint", checkpoint, "--prompts", "1", out=tmp_path / name) == 0
        texts.append((tmp_path / name / "samples" / "samples.txt").read_text(encoding="utf-8"))
    assert texts[0] == texts[1]


def test_cost_rows(tmp_path: Path) -> None:
    """A 12-layer vanilla config gives twelve identical layer rows and a time row."""
    assert run("cost", "model.layers=[12]", out=tmp_path, extra=()) == 0
    rows = read_rows(tmp_path / "analysis" / "cost_memory.csv")
    layers = [row for row in rows if row["component"] == "layer"]
    assert len(layers) == 12
    assert len({row["bytes"] for row in layers}) == 1
    assert rows[-1]["component"] == "total"
    assert tuple(rows[0]) == ("k", "N", "component", "bytes")
    (time_row,) = read_rows(tmp_path / "analysis" / "cost_time.csv")
    assert (time_row["k"], time_row["N"], time_row["measured_ms"]) == ("1", "16", "")


def test_version_mismatch_exits_with_both_versions(
    trained: Path, tmp_path: Path, capsys: pytest.CaptureFixture[str]
) -> None:
    """A checkpoint from another format version fails with exit code 1."""
    data = bytearray((trained / "checkpoints" / "last.mslm").read_bytes())
    data[4:8] = struct.pack("<I", FORMAT_VERSION + 1)
    bad = tmp_path / "bad.mslm"
    bad.write_bytes(bytes(data))
    assert run("eval", "--checkpoint", str(bad), out=tmp_path) == 1
    err = capsys.readouterr().err
    assert f"version {FORMAT_VERSION + 1}" in err
    assert f"expected {FORMAT_VERSION}" in err


def test_missing_corpus_is_a_config_error(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    """A missing training file exits with code 2 and names the key."""
    absent = tmp_path / "absent.txt"
    assert run("train", out=tmp_path, extra=[f"data.train={absent}"]) == 2
    assert "error: data.train:" in capsys.readouterr().err


def test_unknown_key_is_a_config_error(capsys: pytest.CaptureFixture[str]) -> None:
    """Overrides of keys that do not exist are rejected."""
    assert run("config", extra=["model.foo=1"]) == 2
    assert "model.foo" in capsys.readouterr().err


def test_missing_checkpoint(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    """Commands that load a model need an existing checkpoint."""
    assert run("eval", out=tmp_path) == 2
    assert "--checkpoint" in capsys.readouterr().err
    assert run("eval", "--checkpoint", str(tmp_path / "none.mslm"), out=tmp_path) == 2


def test_config_commands(capsys: pytest.CaptureFixture[str]) -> None:
    """``config`` prints the resolved config; ``--reference`` prints the defaults."""
    assert run("config", "--seed", "9", extra=["train.steps=8"]) == 0
    resolved = json.loads(capsys.readouterr().out)
    assert (resolved["seed"], resolved["train"]["steps"]) == (9, 8)
    assert main(["config", "--reference"]) == 0
    reference = json.loads(capsys.readouterr().out)
    assert set(reference) >= {"model", "train", "data", "eval", "analysis", "seed"}


def test_maskshow_causal(capsys: pytest.CaptureFixture[str]) -> None:
    """The causal mask renders as a lower triangle."""
    assert main(["maskshow", "--mask", "causal", "-n", "4"]) == 0
    assert capsys.readouterr().out == "# causal\n#...\n##..\n###.\n####\n"


def test_maskshow_local_and_retina(capsys: pytest.CaptureFixture[str]) -> None:
    """Rendered masks match the mask builders, one titled grid per scale."""
    assert main(["maskshow", "--mask", "local", "-n", "6", "--window", "3"]) == 0
    assert capsys.readouterr().out == f"# local w=3\n{local_mask(6, 3).render()}\n"
    assert main(["maskshow", "--mask", "retina", "-n", "8", "--scales", "4,1", "--boundaries", "0:4,4:16"]) == 0
    fine, coarse = retina_masks(8, [1, 4], WindowBoundaries.parse("0:4,4:16"))
    assert capsys.readouterr().out == f"# retina k=1\n{fine.render()}\n\n# retina k=4\n{coarse.render()}\n"


def test_maskshow_uses_the_config(capsys: pytest.CaptureFixture[str]) -> None:
    """Without --mask the masks of the configured model are shown."""
    assert run("maskshow", "-n", "3", extra=()) == 0
    assert capsys.readouterr().out == f"# causal\n{causal_mask(3).render()}\n"


def test_maskshow_limits(capsys: pytest.CaptureFixture[str]) -> None:
    """Oversized grids and incomplete retina options are config errors."""
    assert main(["maskshow", "--mask", "causal", "-n", "1000"]) == 2
    assert main(["maskshow", "--mask", "retina", "-n", "8"]) == 2
    assert "boundaries" in capsys.readouterr().err
