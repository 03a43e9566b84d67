"""Corpus ingestion, word-level vocabulary, training batches and sliding-window evaluation layout."""

from __future__ import annotations

import json
import logging
import math
import os
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np

from mslm.errors import CorpusError

if TYPE_CHECKING:
    from collections.abc import Iterable, Iterator, Sequence

log = logging.getLogger(__name__)

UNK, BOS = 0, 1
UNK_TOKEN, BOS_TOKEN = "<unk>", "<bos>"
RESERVED = (UNK_TOKEN, BOS_TOKEN)

_DOCUMENT_BREAK = re.compile(r"\n\s*\n")


def split_documents(text: str, lowercase: bool = False) -> list[list[str]]:
    """Whitespace-tokenize ``text``; blank lines separate documents."""
    if lowercase:
        text = text.lower()
    documents = (chunk.split() for chunk in _DOCUMENT_BREAK.split(text))
    return [words for words in documents if words]


@dataclass
class Vocab:
    """Dense id mapping with ``<unk>`` at 0 and ``<bos>`` at 1."""

    tokens: list[str]
    counts: list[int] = field(default_factory=list)
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if tuple(self.tokens[:2]) != RESERVED:
            raise CorpusError(f"vocabulary must start with {RESERVED}, got {self.tokens[:2]}")
        self.index = {token: i for i, token in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise CorpusError("vocabulary contains duplicate tokens")
        if not self.counts:
            self.counts = [0] * len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def encode(self, words: Iterable[str]) -> np.ndarray:
        return np.array([self.index.get(w, UNK) for w in words], dtype=np.int64)

    def decode(self, ids: Iterable[int]) -> list[str]:
        """Map ids back to tokens; ids outside the vocabulary decode as ``<unk>``."""
        size = len(self.tokens)
        return [self.tokens[i] if 0 <= i < size else UNK_TOKEN for i in (int(i) for i in ids)]

    def to_json(self) -> str:
        return json.dumps(self.index, ensure_ascii=False, indent=0, sort_keys=False)

    @classmethod
    def from_mapping(cls, mapping: dict[str, int]) -> Vocab:
        ordered = sorted(mapping.items(), key=lambda item: item[1])
        if [i for _token, i in ordered] != list(range(len(ordered))):
            raise CorpusError("vocabulary ids must be dense and start at 0")
        return cls([token for token, _i in ordered])


def build_vocab(text: str, max_size: int, lowercase: bool = False) -> Vocab:
    """Keep the ``max_size - 2`` most frequent words; ties go to the lexicographically smaller word.

    Raises:
        CorpusError: If the text contains no words
    """
    if max_size < len(RESERVED) + 1:
        raise CorpusError(f"max_size {max_size} leaves no room for words")
    documents = split_documents(text, lowercase)
    counts = Counter(word for words in documents for word in words)
    for token in RESERVED:
        counts.pop(token, None)
    if not counts:
        raise CorpusError("corpus is empty")
    ranked = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
    kept = ranked[: max_size - len(RESERVED)]
    dropped = sum(c for _w, c in ranked[len(kept) :])
    log.info("vocabulary keeps %d of %d word types", len(kept), len(ranked))
    return Vocab(
        [*RESERVED, *(w for w, _c in kept)],
        [dropped, len(documents), *(c for _w, c in kept)],
    )


def encode_documents(documents: Sequence[Sequence[str]], vocab: Vocab) -> np.ndarray:
    """One contiguous stream: every document is preceded by ``<bos>``."""
    parts = []
    for words in documents:
        parts.append(np.array([BOS], dtype=np.int64))
        parts.append(vocab.encode(words))
    if not parts:
        raise CorpusError("corpus is empty")
    return np.concatenate(parts)


def count_words(ids: np.ndarray) -> int:
    """Words in an encoded stream (``<bos>`` markers excluded)."""
    return int(np.count_nonzero(np.asarray(ids) != BOS))


def read_text(path: str | os.PathLike[str]) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CorpusError(f"cannot read corpus {path}: {exc}") from exc


def read_corpus(path: str | os.PathLike[str], vocab: Vocab, lowercase: bool = False) -> np.ndarray:
    """Read and encode a UTF-8 corpus file into one token stream."""
    return encode_documents(split_documents(read_text(path), lowercase), vocab)


def save_vocab(vocab: Vocab, path: str | os.PathLike[str]) -> None:
    Path(path).write_text(vocab.to_json(), encoding="utf-8")


def load_vocab(path: str | os.PathLike[str]) -> Vocab:
    try:
        mapping = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CorpusError(f"cannot read vocabulary {path}: {exc}") from exc
    return Vocab.from_mapping(mapping)


def token_counts(ids: np.ndarray, vocab_size: int) -> np.ndarray:
    return np.bincount(np.asarray(ids), minlength=vocab_size)


class BatchSampler:
    """Uniformly placed training chunks drawn from one seeded generator.

    The generator state is the sampler's whole state, so a run resumed from
    :meth:`state` draws the same batches as an uninterrupted one.
    """

    def __init__(self, stream: np.ndarray, length: int, batch_size: int, seed: int = 0) -> None:
        self.stream = np.asarray(stream, dtype=np.int64)
        if len(self.stream) < length:
            raise CorpusError(f"stream of {len(self.stream)} tokens is shorter than one chunk of {length}")
        self.length = length
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)

    def starts(self) -> np.ndarray:
        return self.rng.integers(0, len(self.stream) - self.length + 1, size=self.batch_size)

    def __iter__(self) -> Iterator[np.ndarray]:
        return self

    def __next__(self) -> np.ndarray:
        offsets = self.starts()[:, None] + np.arange(self.length)[None, :]
        return self.stream[offsets]

    def state(self) -> dict[str, Any]:
        return self.rng.bit_generator.state

    def restore(self, state: dict[str, Any]) -> None:
        self.rng.bit_generator.state = state


def sample_training_batches(stream: np.ndarray, length: int, batch_size: int, seed: int) -> Iterator[np.ndarray]:
    """Endless deterministic sequence of (batch_size, length) chunks."""
    return iter(BatchSampler(stream, length, batch_size, seed))


@dataclass(frozen=True)
class EvalWindow:
    """Tokens ``[start, end)`` are fed to the model; targets ``[score_from, end)`` are scored."""

    start: int
    end: int
    score_from: int

    @property
    def scored(self) -> int:
        return self.end - self.score_from


def sliding_eval(tokens: Sequence[int] | np.ndarray, window: int, stride: int, offset: int = 1) -> list[EvalWindow]:
    """Overlapping evaluation windows of ``window`` tokens advancing by ``stride``.

    The first window scores every target it can predict (from ``offset``
    onwards); each later window scores only the targets after the previous
    window's end, so every target from ``offset`` on is scored exactly once.
    """
    n = len(tokens)
    if not 1 <= stride <= window - offset:
        raise ValueError(f"stride {stride} must be in [1, {window - offset}] for windows of {window}")
    if n <= offset:
        return []
    end = min(window, n)
    windows = [EvalWindow(max(0, end - window), end, offset)]
    while end < n:
        previous, end = end, min(end + stride, n)
        windows.append(EvalWindow(max(0, end - window), end, previous))
    return windows


def word_level_renormalize(total_nll: float, num_words: int) -> float:
    """Perplexity per word: ``exp(total_nll / num_words)``."""
    if num_words <= 0:
        raise ValueError(f"need a positive word count, got {num_words}")
    return math.exp(total_nll / num_words)


def unigram_perplexity(train: np.ndarray, heldout: np.ndarray, vocab_size: int) -> float:
    """Add-one smoothed unigram perplexity of the held-out words, the floor any LM should beat."""
    counts = token_counts(train, vocab_size).astype(np.float64)
    probs = (counts + 1.0) / (counts.sum() + vocab_size)
    targets = np.asarray(heldout)[np.asarray(heldout) != BOS]
    if not targets.size:
        raise CorpusError("held-out stream has no words")
    return float(np.exp(-np.log(probs[targets]).mean()))
