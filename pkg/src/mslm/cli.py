"""Command-line entry point: ``mslm <command> [options] [section.key=value ...]``.

Every command reads a JSON run config (``--config``), applies dotted
overrides, and writes its artifacts below ``--out``::

    config_echo.json  vocab.json  metrics.csv  checkpoints/
    analysis/*.csv    samples/*.txt
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import TYPE_CHECKING, Literal

import numpy as np
from pydantic import ValidationError

from mslm import analysis, cost_model
from mslm.architectures import CoarseLM
from mslm.checkpoint import load_model
from mslm.config import RunConfig, canonical_json, describe_validation, load_config, reference_config
from mslm.data import (
    Vocab,
    build_vocab,
    encode_documents,
    read_corpus,
    read_text,
    save_vocab,
    split_documents,
    token_counts,
    unigram_perplexity,
)
from mslm.errors import ConfigError, MslmError
from mslm.masks import WindowBoundaries, causal_mask, cross_scale_mask, local_mask, retina_masks
from mslm.trainer import train, validation_ppl

if TYPE_CHECKING:
    from collections.abc import Callable, Iterable, Mapping, Sequence

    from mslm.architectures import LanguageModel
    from mslm.config import ModelConfig
    from mslm.masks import AttentionMask

log = logging.getLogger(__name__)

MAX_RENDER = 256


def write_csv(path: Path, rows: Iterable[Mapping[str, object]], fields: Sequence[str]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as out:
        writer = csv.DictWriter(out, fieldnames=list(fields), restval="", lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    log.info("wrote %s", path)
    return path


def _int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def load_run(args: argparse.Namespace) -> RunConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return load_config(args.config, overrides)


def with_model(config: RunConfig, model: ModelConfig) -> RunConfig:
    """``config`` with its model section replaced by the one a checkpoint was trained with."""
    raw = config.model_dump(mode="json")
    raw["model"] = model.model_dump(mode="json")
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise describe_validation(exc) from exc


def load_trained(args: argparse.Namespace) -> tuple[LanguageModel, RunConfig, Vocab]:
    """Model, effective run config and vocabulary of ``--checkpoint``."""
    if args.checkpoint is None:
        raise ConfigError("checkpoint", "this command needs --checkpoint")
    path = Path(args.checkpoint)
    if not path.is_file():
        raise ConfigError("checkpoint", f"checkpoint {path} does not exist")
    model, checkpoint = load_model(path)
    config = with_model(load_run(args), checkpoint.config)
    if "vocab" not in checkpoint.state:
        raise ConfigError("checkpoint", f"{path} holds no vocabulary")
    return model, config, Vocab(list(checkpoint.state["vocab"]))


def held_out(config: RunConfig, vocab: Vocab, split: Literal["train", "valid", "test"]) -> np.ndarray:
    return read_corpus(config.data.require(split), vocab, config.data.lowercase)


def cmd_train(args: argparse.Namespace) -> int:
    if args.config is None:
        raise ConfigError("config", "train needs --config")
    config = load_run(args)
    text = read_text(config.data.require("train"))
    valid_path = config.data.require("valid") if config.data.valid else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config_echo.json").write_text(canonical_json(config), encoding="utf-8")

    vocab = build_vocab(text, config.model.vocab_size, config.data.lowercase)
    save_vocab(vocab, out / "vocab.json")
    train_stream = encode_documents(split_documents(text, config.data.lowercase), vocab)
    valid_stream = None
    if valid_path is not None:
        valid_stream = read_corpus(valid_path, vocab, config.data.lowercase)
        baseline = unigram_perplexity(train_stream, valid_stream, len(vocab))
        log.info("unigram perplexity on valid: %.3f", baseline)
    trainer = train(config, train_stream, valid_stream, out, vocab, resume=args.resume)
    log.info("finished after %d steps", trainer.state.step)
    return 0


EVAL_FIELDS = ("split", "context", "stride", "targets", "words", "total_nll", "token_ppl", "word_ppl")


def cmd_eval(args: argparse.Namespace) -> int:
    model, config, vocab = load_trained(args)
    tokens = held_out(config, vocab, args.split)
    context, stride = config.eval_window()
    row: dict[str, object] = {"split": args.split, "context": context, "stride": stride}
    if isinstance(model, CoarseLM):
        row["token_ppl"] = validation_ppl(model, tokens, context, stride)
    else:
        result = analysis.perplexity(model, tokens, context, stride)
        row.update(
            targets=result.num_targets,
            words=result.num_words,
            total_nll=result.total_nll,
            token_ppl=result.token_ppl,
            word_ppl=result.word_ppl,
        )
    write_csv(Path(args.out) / "analysis" / "eval.csv", [row], EVAL_FIELDS)
    return 0


def cmd_perturb(args: argparse.Namespace) -> int:
    model, config, vocab = load_trained(args)
    tokens = held_out(config, vocab, args.split)
    context = args.context or config.analysis.perturb_context
    curve = analysis.shuffle_perturbation(
        model, tokens, context, config.seed, identity=args.identity_permutation, max_windows=args.windows
    )
    write_csv(
        Path(args.out) / "analysis" / "perturbation.csv",
        curve.rows(),
        ("distance_lo", "distance_hi", "mean_delta_nll", "count"),
    )
    return 0


def _words(vocab: Vocab, ids: Iterable[int]) -> str:
    return " ".join(vocab.decode(ids))


def cmd_sample(args: argparse.Namespace) -> int:
    model, config, vocab = load_trained(args)
    tokens = held_out(config, vocab, args.split)
    options = config.analysis
    out = Path(args.out)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    if isinstance(model, CoarseLM):
        lines = []
        for start in np.linspace(0, len(tokens) - options.sample_context, args.prompts).astype(np.int64):
            context = tokens[start : start + options.sample_context]
            lines.append(f"# start {start}\n# context {_words(vocab, context)}\n")
            lines.extend(f"{vocab.decode([i])[0]}\t{p:.6f}\n" for i, p in analysis.coarse_completions(model, context))
            lines.append("\n")
        (out / "samples" / "coarse.txt").write_text("".join(lines), encoding="utf-8")
        return 0

    records = analysis.generate_samples(model, tokens, options, config.seed, args.prompts)
    lines = []
    metrics = []
    for p, record in enumerate(records):
        for j, completion in enumerate(record.completions):
            lines.append(f"# prompt {p} sample {j} start {record.start}\n")
            lines.append(f"# context {_words(vocab, record.context)}\n")
            lines.append(f"# truth {_words(vocab, record.ground_truth)}\n")
            lines.append(f"{_words(vocab, completion)}\n\n")
        row: dict[str, object] = {"prompt": p, "start": record.start, "seconds_per_sample": record.seconds, "bleu": record.bleu}
        row.update({f"repeat_{n}": value for n, value in record.repeats.items()})
        metrics.append(row)
    (out / "samples" / "samples.txt").write_text("".join(lines), encoding="utf-8")
    write_csv(
        out / "analysis" / "sample_metrics.csv",
        metrics,
        ("prompt", "start", "seconds_per_sample", "bleu", "repeat_1", "repeat_2", "repeat_3", "repeat_4"),
    )
    return 0


def cmd_nn(args: argparse.Namespace) -> int:
    model, config, vocab = load_trained(args)
    tokens = held_out(config, vocab, args.split)
    chunk = config.check_chunk("--chunk", args.chunk) if args.chunk else config.neighbour_chunk()
    top_n = args.top_n or config.analysis.nn_top_n
    ranked = analysis.nearest_neighbors(model, tokens, args.scale, args.query, top_n, chunk)
    rows = [
        {
            "rank": rank,
            "chunk": index,
            "similarity": sim,
            "text": _words(vocab, tokens[index * chunk : (index + 1) * chunk]),
        }
        for rank, (index, sim) in enumerate(ranked, start=1)
    ]
    write_csv(Path(args.out) / "analysis" / f"neighbors_k{args.scale}.csv", rows, ("rank", "chunk", "similarity", "text"))
    return 0


def cmd_freq(args: argparse.Namespace) -> int:
    model, config, vocab = load_trained(args)
    counts = token_counts(held_out(config, vocab, "train"), model.config.vocab_size)
    tokens = held_out(config, vocab, args.split)
    context, stride = config.eval_window()
    bins = analysis.nll_by_frequency(model, tokens, counts, args.nbins or config.analysis.nbins, context, stride)
    write_csv(Path(args.out) / "analysis" / "frequency.csv", bins.rows(), ("bin", "train_mass", "count", "mean_nll"))
    return 0


def cmd_cost(args: argparse.Namespace) -> int:
    config = load_run(args)
    cfg = config.model
    profile = cost_model.Profile(bytes_per_element=args.bytes, adam_state=args.adam)
    base = cost_model.CostParams(
        batch=args.batch or config.train.batch_size,
        length=cfg.context_length,
        d_model=cfg.d_model,
        num_heads=cfg.num_heads,
        d_ff=cfg.d_ff,
        profile=profile,
    )
    lengths = args.lengths or [cfg.context_length]
    rows: list[dict[str, object]] = []
    for n in lengths:
        report = cost_model.model_memory(cfg, replace(base, length=n))
        rows.extend(cost_model.memory_rows(report, n))
    out = Path(args.out) / "analysis"
    write_csv(out / "cost_memory.csv", rows, cost_model.MEMORY_FIELDS)
    curve = cost_model.time_curve(base, lengths, cfg.scales, measure=args.measure)
    write_csv(out / "cost_time.csv", curve, ("k", "N", "flops", "measured_ms"))
    return 0


def config_masks(cfg: ModelConfig, n: int) -> list[tuple[str, AttentionMask]]:
    """The attention masks a model built from ``cfg`` uses on ``n`` tokens."""
    if cfg.family == "retina":
        ascending = sorted(cfg.scales)
        masks = retina_masks(n, ascending, cfg.windows())
        return [(f"retina k={k}", m) for k, m in zip(ascending, masks)]
    if cfg.family == "bottomup":
        named = [("causal k=1", causal_mask(n))]
        return named + [(f"cross k={k}", cross_scale_mask(n, k)) for k in cfg.scales[:-1]]
    if cfg.family in ("topdown", "coarse"):
        scales = cfg.scales if cfg.family == "topdown" else (cfg.coarsest,)
        return [(f"causal k={k}", causal_mask(n // k)) for k in scales if n // k]
    if cfg.attention_window is not None:
        return [(f"local w={cfg.attention_window}", local_mask(n, cfg.attention_window))]
    return [("causal", causal_mask(n))]


def cmd_maskshow(args: argparse.Namespace) -> int:
    n = args.n
    if n > MAX_RENDER:
        raise ConfigError("n", f"masks are rendered up to {MAX_RENDER} positions, got {n}")
    if args.mask == "causal":
        named = [("causal", causal_mask(n))]
    elif args.mask == "local":
        named = [(f"local w={args.window}", local_mask(n, args.window))]
    elif args.mask == "cross":
        named = [(f"cross k={args.scale}", cross_scale_mask(n, args.scale))]
    elif args.mask == "retina":
        if not args.scales or not args.boundaries:
            raise ConfigError("boundaries", "retina masks need --scales and --boundaries")
        ascending = sorted(args.scales)
        masks = retina_masks(n, ascending, WindowBoundaries.parse(args.boundaries))
        named = [(f"retina k={k}", m) for k, m in zip(ascending, masks)]
    else:
        named = config_masks(load_run(args).model, n)
    sys.stdout.write("\n\n".join(f"# {title}\n{mask.render()}" for title, mask in named) + "\n")
    return 0


def cmd_config(args: argparse.Namespace) -> int:
    sys.stdout.write(reference_config() if args.reference else canonical_json(load_run(args)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--checkpoint", help="checkpoint written by `mslm train`")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--out", default=".", help="output directory (default: current directory)")
    common.add_argument("--verbose", "-v", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(
        prog="mslm",
        description="Multi-scale transformer language models.",
        epilog="Any section.key=value argument overrides one config value.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    def add(name: str, handler: Callable[[argparse.Namespace], int], help_text: str) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, parents=[common], help=help_text)
        sub.set_defaults(handler=handler)
        return sub

    add("train", cmd_train, "train a model").add_argument("--resume", help="continue from a checkpoint")
    for name, handler, help_text in (
        ("eval", cmd_eval, "sliding-window perplexity"),
        ("perturb", cmd_perturb, "NLL change after shuffling distant context"),
        ("sample", cmd_sample, "top-k samples and sample metrics"),
        ("nn", cmd_nn, "nearest-neighbour chunks at one scale"),
        ("freq", cmd_freq, "test NLL by training-frequency bin"),
    ):
        sub = add(name, handler, help_text)
        sub.add_argument("--split", choices=("valid", "test"), default="test")
        if name == "perturb":
            sub.add_argument("--identity-permutation", action="store_true", help="leave the context unshuffled")
            sub.add_argument("--context", type=int, help="shuffled tokens per window")
            sub.add_argument("--windows", type=int, help="use at most this many windows")
        elif name == "sample":
            sub.add_argument("--prompts", type=int, default=4, help="number of held-out contexts")
        elif name == "nn":
            sub.add_argument("--scale", type=int, default=1)
            sub.add_argument("--query", type=int, default=0, help="index of the query chunk")
            sub.add_argument("--top-n", type=int)
            sub.add_argument("--chunk", type=int, help="tokens per chunk")
        elif name == "freq":
            sub.add_argument("--nbins", type=int)

    cost = add("cost", cmd_cost, "analytic memory and time model")
    cost.add_argument("--batch", type=int)
    cost.add_argument("--lengths", type=_int_list, help="comma-separated sequence lengths")
    cost.add_argument("--bytes", type=int, default=4, help="bytes per stored element")
    cost.add_argument("--adam", action="store_true", help="count Adam moment buffers")
    cost.add_argument("--measure", action="store_true", help="also time single layers")

    mask = add("maskshow", cmd_maskshow, "render attention masks as text")
    mask.add_argument("--mask", choices=("causal", "local", "cross", "retina"), help="default: the config's masks")
    mask.add_argument("-n", type=int, default=16, help="sequence length")
    mask.add_argument("--window", type=int, default=8)
    mask.add_argument("--scale", type=int, default=4)
    mask.add_argument("--scales", type=_int_list)
    mask.add_argument("--boundaries", help="retina windows, finest first, e.g. 0:4,4:16")

    add("config", cmd_config, "print the resolved config").add_argument(
        "--reference", action="store_true", help="print every key with its default"
    )
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    """Run one command; returns the process exit code."""
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    unknown = [item for item in extra if item.startswith("-") or "=" not in item]
    if unknown:
        parser.error(f"unrecognized arguments: {' '.join(unknown)}")
    args.overrides = extra
    if args.verbose:
        logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.handler(args)
    except ValidationError as exc:
        error: MslmError = describe_validation(exc)
        code = 2
    except ConfigError as exc:
        error, code = exc, 2
    except MslmError as exc:
        error, code = exc, 1
    except FileNotFoundError as exc:
        sys.stderr.write(f"error: {exc.filename}: file not found\n")
        return 2
    log.debug("command failed", exc_info=error)
    sys.stderr.write(f"error: {error}\n")
    return code
