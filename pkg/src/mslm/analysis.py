"""Evaluation and analysis procedures run against a trained model.

Every procedure is read-only over the model's weights and runs in eval mode.
Work over evaluation windows or chunks is spread across a thread pool whose
size is capped by the ``MSLM_THREADS`` environment variable; results are
always aggregated in window order, so the thread count never changes them.
"""

from __future__ import annotations

import logging
import math
import os
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from mslm import tensor as tc
from mslm.architectures import (
    CoarseLM,
    LanguageModel,
    as_batch,
    hidden_states_at_scale,
    next_token_logits,
    target_nll,
)
from mslm.data import UNK, count_words, sliding_eval, word_level_renormalize
from mslm.errors import ConfigError, CorpusError
from mslm.nn import EVAL

if TYPE_CHECKING:
    from collections.abc import Callable, Iterable, Sequence

    from mslm.config import AnalysisConfig
    from mslm.data import EvalWindow

log = logging.getLogger(__name__)


def worker_count() -> int:
    """Threads used for analysis: the CPU count, capped by ``MSLM_THREADS``."""
    workers = os.cpu_count() or 1
    cap = os.getenv("MSLM_THREADS")
    if cap:
        try:
            workers = min(workers, int(cap))
        except ValueError as exc:
            raise ConfigError("MSLM_THREADS", f"expected an integer, got {cap!r}") from exc
        if workers < 1:
            raise ConfigError("MSLM_THREADS", f"must be at least 1, got {cap!r}")
    return workers


def _ordered_map(fn: Callable, items: Sequence) -> list:
    workers = min(worker_count(), len(items))
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# Perplexity


@dataclass(frozen=True)
class PerplexityResult:
    total_nll: float
    num_targets: int
    num_words: int

    @property
    def token_ppl(self) -> float:
        return math.exp(self.total_nll / self.num_targets)

    @property
    def word_ppl(self) -> float:
        """Perplexity renormalized by the number of words rather than tokens."""
        return word_level_renormalize(self.total_nll, self.num_words)


def eval_windows(model: LanguageModel, n: int, context: int, stride: int) -> list[EvalWindow]:
    """Sliding windows over ``n`` tokens that give every model input ``context`` tokens."""
    window = context + model.chunk_length - model.config.context_length
    return sliding_eval(range(n), window, stride, model.first_target(window))


def scored_nll(
    model: LanguageModel, tokens: np.ndarray, context: int, stride: int
) -> tuple[np.ndarray, np.ndarray]:
    """Positions and NLLs of every target scored by sliding-window evaluation.

    Returns:
        Token positions in ascending order and the NLL (nats) of each.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    windows = eval_windows(model, len(tokens), context, stride)
    if not windows:
        raise CorpusError(f"{len(tokens)} tokens leave nothing to score")

    def score(w: EvalWindow) -> tuple[np.ndarray, np.ndarray]:
        first, nll = target_nll(model, tokens[w.start : w.end])
        positions = w.start + first + np.arange(nll.shape[1])
        keep = positions >= w.score_from
        return positions[keep], nll[0, keep]

    parts = _ordered_map(score, windows)
    positions = np.concatenate([p for p, _nll in parts])
    nll = np.concatenate([v for _p, v in parts])
    log.debug("scored %d targets in %d windows", len(positions), len(windows))
    return positions, nll


def perplexity(
    model: LanguageModel, tokens: np.ndarray, context: int | None = None, stride: int | None = None
) -> PerplexityResult:
    """Token and word perplexity by sliding-window evaluation.

    Args:
        model: Any next-token model
        tokens: One encoded held-out stream
        context: Tokens of context per window (default: the model's training context)
        stride: Targets advanced per window (default: half the context)

    Returns:
        The summed NLL with the token and word counts it was taken over
    """
    context = model.config.context_length if context is None else context
    stride = max(1, context // 2) if stride is None else stride
    positions, nll = scored_nll(model, tokens, context, stride)
    total = float(np.sum(nll, dtype=np.float64))
    words = count_words(np.asarray(tokens)[positions])
    return PerplexityResult(total, len(positions), words)


# Shuffled-context perturbation


def distance_buckets(context: int) -> list[tuple[int, int]]:
    """Distance ranges ``1-4, 5-8, 9-16, ...`` doubling until ``context``."""
    buckets = []
    lo, hi = 1, 4
    while lo <= context:
        buckets.append((lo, min(hi, context)))
        lo, hi = hi + 1, hi * 2
    return buckets


@dataclass
class PerturbationCurve:
    """Mean NLL increase (nats) per distance bucket from the shuffled region."""

    buckets: list[tuple[int, int]]
    mean_delta: list[float]
    counts: list[int]

    def rows(self) -> list[dict[str, object]]:
        return [
            {"distance_lo": lo, "distance_hi": hi, "mean_delta_nll": delta, "count": count}
            for (lo, hi), delta, count in zip(self.buckets, self.mean_delta, self.counts)
        ]


def shuffle_perturbation(
    model: LanguageModel,
    tokens: np.ndarray,
    context: int,
    seed: int = 0,
    identity: bool = False,
    max_windows: int | None = None,
) -> PerturbationCurve:
    """Compare the NLL of tokens ``C..2C-1`` under a clean and a shuffled first half.

    ``tokens`` is cut into non-overlapping windows of ``2 * context`` tokens. In
    each window the first ``context`` tokens are permuted with a seeded
    generator (or left alone when ``identity`` is set) and the NLL change of
    every token in the second half is bucketed by its distance ``p - C + 1``
    from the end of the shuffled region.

    Raises:
        CorpusError: If ``tokens`` holds less than one window
        ValueError: If a window does not fit the model's context
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    span = 2 * context
    if span > model.chunk_length:
        raise ValueError(f"windows of {span} tokens exceed the model's chunk of {model.chunk_length}")
    count = len(tokens) // span
    if max_windows is not None:
        count = min(count, max_windows)
    if count < 1:
        raise CorpusError(f"perturbation needs at least {span} tokens, got {len(tokens)}")
    first = model.first_target(span)
    if first > context:
        raise ValueError(f"first predicted position {first} lies inside the shuffled region")

    clean = tokens[: count * span].reshape(count, span)
    shuffled = clean.copy()
    rng = np.random.default_rng(seed)
    for row in shuffled:
        order = np.arange(context) if identity else rng.permutation(context)
        row[:context] = row[:context][order]

    def second_half(batch: np.ndarray) -> np.ndarray:
        _first, nll = target_nll(model, batch)
        return nll[:, context - first :]

    clean_nll, shuffled_nll = _ordered_map(second_half, [clean, shuffled])
    delta = shuffled_nll - clean_nll
    distance = np.arange(context) + 1
    buckets = distance_buckets(context)
    means, counts = [], []
    for lo, hi in buckets:
        cols = (distance >= lo) & (distance <= hi)
        means.append(float(delta[:, cols].mean()))
        counts.append(int(cols.sum()) * count)
    log.info("perturbation over %d windows of %d tokens", count, span)
    return PerturbationCurve(buckets, means, counts)


# NLL by training frequency


def frequency_bins(counts: np.ndarray, nbins: int) -> np.ndarray:
    """Bin index per token id, rare to frequent, with equal cumulative frequency per bin.

    Ids are ordered by count (ties by id); an id lands in bin
    ``floor(mass_before * nbins / total)``, where ``mass_before`` is the count of
    every id ordered before it.

    Raises:
        ValueError: If there are fewer distinct observed tokens than bins
    """
    counts = np.asarray(counts, dtype=np.int64)
    distinct = int(np.count_nonzero(counts))
    if nbins < 1 or nbins > distinct:
        raise ValueError(f"cannot split {distinct} distinct tokens into {nbins} bins")
    order = np.lexsort((np.arange(len(counts)), counts))
    before = np.cumsum(counts[order]) - counts[order]
    bins = np.empty(len(counts), dtype=np.int64)
    bins[order] = np.minimum(nbins - 1, before * nbins // counts.sum())
    return bins


@dataclass
class FrequencyBins:
    """Per bin (rare to frequent): training mass, test targets scored and their mean NLL."""

    bins: np.ndarray
    mass: list[int]
    counts: list[int]
    mean_nll: list[float] = field(default_factory=list)

    def rows(self) -> list[dict[str, object]]:
        return [
            {"bin": b, "train_mass": mass, "count": count, "mean_nll": nll}
            for b, (mass, count, nll) in enumerate(zip(self.mass, self.counts, self.mean_nll))
        ]


def nll_by_frequency(
    model: LanguageModel,
    tokens: np.ndarray,
    train_counts: np.ndarray,
    nbins: int = 5,
    context: int | None = None,
    stride: int | None = None,
) -> FrequencyBins:
    """Mean test NLL of the targets in each training-frequency bin."""
    train_counts = np.asarray(train_counts)
    bins = frequency_bins(train_counts, nbins)
    context = model.config.context_length if context is None else context
    stride = max(1, context // 2) if stride is None else stride
    positions, nll = scored_nll(model, tokens, context, stride)
    target_bins = bins[np.asarray(tokens)[positions]]
    result = FrequencyBins(bins, [], [])
    for b in range(nbins):
        members = target_bins == b
        result.mass.append(int(train_counts[bins == b].sum()))
        result.counts.append(int(members.sum()))
        result.mean_nll.append(float(nll[members].mean()) if members.any() else float("nan"))
    return result


# Nearest neighbours


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    norm = float(np.linalg.norm(a) * np.linalg.norm(b))
    return float(np.dot(a, b)) / norm if norm else 0.0


def chunk_representations(model: LanguageModel, tokens: np.ndarray, scale: int, chunk: int) -> np.ndarray:
    """Mean-pooled scale-``scale`` states of each non-overlapping ``chunk``-token chunk."""
    if chunk < model.min_length():
        raise ValueError(f"chunks of {chunk} tokens are shorter than the {model.min_length()} tokens the model reads")
    tokens = np.asarray(tokens, dtype=np.int64)
    count = len(tokens) // chunk
    if count < 1:
        raise CorpusError(f"need at least one chunk of {chunk} tokens, got {len(tokens)}")

    def represent(i: int) -> np.ndarray:
        states = hidden_states_at_scale(model, tokens[i * chunk : (i + 1) * chunk], scale).data[0]
        if not len(states):
            raise ValueError(f"chunks of {chunk} tokens hold no frames at scale {scale}")
        return states.mean(axis=0)

    return np.stack(_ordered_map(represent, list(range(count))))


def rank_neighbors(reps: np.ndarray, query: int, top_n: int) -> list[tuple[int, float]]:
    """The ``top_n`` chunks most similar to ``query`` (itself included), ties by index."""
    sims = [(i, cosine_similarity(reps[query], rep)) for i, rep in enumerate(reps)]
    sims.sort(key=lambda item: (-item[1], item[0]))
    return sims[:top_n]


def nearest_neighbors(
    model: LanguageModel, tokens: np.ndarray, scale: int, query: int, top_n: int = 5, chunk: int = 16
) -> list[tuple[int, float]]:
    """Rank corpus chunks by cosine similarity to chunk ``query`` at ``scale``."""
    reps = chunk_representations(model, tokens, scale, chunk)
    if not 0 <= query < len(reps):
        raise IndexError(f"query chunk {query} out of range for {len(reps)} chunks")
    return rank_neighbors(reps, query, top_n)


# Sampling


def choose_token(logits: np.ndarray, top_k: int, temperature: float, rng: np.random.Generator) -> int:
    """Draw from the temperature-scaled top-``top_k`` distribution; ties rank the lower id first."""
    order = np.argsort(-logits, kind="stable")
    if temperature <= 0 or top_k == 1:
        return int(order[0])
    keep = order[:top_k]
    z = logits[keep].astype(np.float64) / temperature
    p = np.exp(z - z.max())
    cdf = np.cumsum(p / p.sum())
    index = min(int(np.searchsorted(cdf, rng.random(), side="right")), len(keep) - 1)
    return int(keep[index])


def sample(
    model: LanguageModel,
    context: Sequence[int] | np.ndarray,
    max_new: int,
    top_k: int = 40,
    temperature: float = 0.7,
    seed: int | Sequence[int] = 0,
    suppress_unk: bool = False,
) -> np.ndarray:
    """Extend ``context`` by ``max_new`` sampled tokens and return only the new ones."""
    if not len(context):
        raise ValueError("sampling needs a non-empty context")
    if top_k < 1:
        raise ValueError(f"top_k must be at least 1, got {top_k}")
    rng = np.random.default_rng(seed)
    sequence = [int(t) for t in context]
    for _ in range(max_new):
        logits = next_token_logits(model, np.asarray(sequence))
        if suppress_unk:
            logits = logits.copy()
            logits[UNK] = -np.inf
        sequence.append(choose_token(logits, top_k, temperature, rng))
    return np.asarray(sequence[len(context) :], dtype=np.int64)


def ngram_repeat_fraction(tokens: Sequence[int] | np.ndarray, n: int, window: int = 256) -> float:
    """Fraction of n-grams that already occurred at most ``window`` positions earlier."""
    tokens = [int(t) for t in tokens]
    total = len(tokens) - n + 1
    if n < 1 or total < 1:
        raise ValueError(f"cannot take {n}-grams of {len(tokens)} tokens")
    last: dict[tuple[int, ...], int] = {}
    repeats = 0
    for i in range(total):
        gram = tuple(tokens[i : i + n])
        j = last.get(gram)
        if j is not None and i - j <= window:
            repeats += 1
        last[gram] = i
    return repeats / total


def _ngrams(tokens: Sequence[int], n: int) -> Counter[tuple[int, ...]]:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def ref_bleu(candidate: Sequence[int], references: Iterable[Sequence[int]], max_n: int = 4) -> float:
    """BLEU of ``candidate`` against several references, without smoothing.

    Here the candidate is the ground-truth continuation and the references are
    the model's completions of the same context.
    """
    candidate = [int(t) for t in candidate]
    references = [[int(t) for t in ref] for ref in references]
    if not candidate or not references or not all(references):
        raise ValueError("BLEU needs a non-empty candidate and non-empty references")
    log_precision = 0.0
    for n in range(1, max_n + 1):
        grams = _ngrams(candidate, n)
        total = sum(grams.values())
        if not total:
            return 0.0
        best: Counter[tuple[int, ...]] = Counter()
        for ref in references:
            for gram, count in _ngrams(ref, n).items():
                best[gram] = max(best[gram], count)
        clipped = sum(min(count, best[gram]) for gram, count in grams.items())
        if not clipped:
            return 0.0
        log_precision += math.log(clipped / total) / max_n
    c = len(candidate)
    r = min((len(ref) for ref in references), key=lambda length: (abs(length - c), length))
    penalty = 1.0 if c > r else math.exp(1.0 - r / c)
    return penalty * math.exp(log_precision)


@dataclass
class SampleRecord:
    start: int
    context: np.ndarray
    ground_truth: np.ndarray
    completions: list[np.ndarray]
    seconds: float
    bleu: float
    repeats: dict[int, float]


def generate_samples(
    model: LanguageModel, tokens: np.ndarray, options: AnalysisConfig, seed: int = 0, prompts: int = 1
) -> list[SampleRecord]:
    """Complete ``prompts`` evenly spaced contexts of the held-out stream several times each."""
    tokens = np.asarray(tokens, dtype=np.int64)
    span = options.sample_context + options.sample_length
    if len(tokens) < span:
        raise CorpusError(f"sampling needs {span} tokens, got {len(tokens)}")
    starts = np.linspace(0, len(tokens) - span, prompts).astype(np.int64)
    records = []
    for p, start in enumerate(starts):
        context = tokens[start : start + options.sample_context]
        truth = tokens[start + options.sample_context : start + span]
        began = time.perf_counter()
        completions = [
            sample(
                model,
                context,
                options.sample_length,
                options.top_k,
                options.temperature,
                seed=[seed, p, j],
                suppress_unk=options.suppress_unk,
            )
            for j in range(options.num_samples)
        ]
        seconds = (time.perf_counter() - began) / options.num_samples
        repeats = {
            n: float(np.mean([ngram_repeat_fraction(c, n) for c in completions]))
            for n in range(1, 5)
            if options.sample_length >= n
        }
        records.append(
            SampleRecord(int(start), context, truth, completions, seconds, ref_bleu(truth, completions), repeats)
        )
        log.info("prompt %d: %.3f s per sample, bleu %.4f", p, seconds, records[-1].bleu)
    return records


def coarse_completions(model: CoarseLM, context: Sequence[int] | np.ndarray, top_n: int = 10) -> list[tuple[int, float]]:
    """Most probable words of the chunk following ``context``, from the last full frame."""
    k = model.config.coarsest
    context = np.asarray(context, dtype=np.int64)
    keep = min(len(context), model.chunk_length) // k * k
    if keep < k:
        raise ValueError(f"a coarse model needs at least {k} context tokens, got {len(context)}")
    with tc.no_grad():
        logits = model.forward(as_batch(context[len(context) - keep :]), EVAL).data[0, -1]
    probs = np.exp(tc.log_softmax_data(logits))
    order = np.argsort(-probs, kind="stable")[:top_n]
    return [(int(i), float(probs[i])) for i in order]
