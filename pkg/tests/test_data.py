"""Tests for corpus reading, the vocabulary, batching and evaluation windows."""

from __future__ import annotations

import math
from typing import TYPE_CHECKING

import numpy as np
import pytest

from mslm.data import (
    BOS,
    UNK,
    BatchSampler,
    Vocab,
    build_vocab,
    count_words,
    encode_documents,
    load_vocab,
    read_corpus,
    read_text,
    sample_training_batches,
    save_vocab,
    sliding_eval,
    split_documents,
    token_counts,
    unigram_perplexity,
    word_level_renormalize,
)
from mslm.errors import CorpusError

if TYPE_CHECKING:
    from pathlib import Path


def test_blank_lines_separate_documents() -> None:
    """Whitespace-only lines count as document breaks."""
    assert split_documents("a b\n\n \n c\nd\n\n\n") == [["a", "b"], ["c", "d"]]
    assert split_documents("A b", lowercase=True) == [["a", "b"]]


def test_vocab_order_and_ties() -> None:
    """Frequent words come first; ties go to the smaller word; the rest map to <unk>."""
    vocab = build_vocab("b a b a c", max_size=4)
    assert vocab.tokens == ["<unk>", "<bos>", "a", "b"]
    assert vocab.counts == [1, 1, 2, 2]
    assert vocab.encode(["a", "c", "b"]).tolist() == [2, UNK, 3]
    assert vocab.decode([3, 2, 99]) == ["b", "a", "<unk>"]


def test_reserved_tokens_are_not_counted_as_words() -> None:
    """Literal <bos> in the text does not take a vocabulary slot."""
    vocab = build_vocab("<bos> x <bos> y y", max_size=10)
    assert vocab.tokens == ["<unk>", "<bos>", "y", "x"]


def test_vocab_errors() -> None:
    """Empty corpora and malformed vocabularies are rejected."""
    with pytest.raises(CorpusError, match="empty"):
        build_vocab(" \n\n ", max_size=10)
    with pytest.raises(CorpusError, match="no room"):
        build_vocab("a b", max_size=2)
    with pytest.raises(CorpusError, match="must start"):
        Vocab(["a", "<unk>", "<bos>"])
    with pytest.raises(CorpusError, match="dense"):
        Vocab.from_mapping({"<unk>": 0, "<bos>": 1, "a": 3})


def test_stream_has_bos_per_document(cases: Path) -> None:
    """Each document is preceded by <bos> and words keep their ids."""
    text = read_text(cases / "train.txt")
    vocab = build_vocab(text, max_size=64)
    stream = read_corpus(cases / "train.txt", vocab)
    documents = split_documents(text)
    assert stream[0] == BOS
    assert int((stream == BOS).sum()) == len(documents)
    assert count_words(stream) == sum(len(words) for words in documents)
    assert stream.dtype == np.int64


def test_encode_documents_layout() -> None:
    """Documents are concatenated with a <bos> before each."""
    vocab = Vocab(["<unk>", "<bos>", "a", "b"])
    stream = encode_documents([["a", "b"], ["b", "z"]], vocab)
    assert stream.tolist() == [BOS, 2, 3, BOS, 3, UNK]
    with pytest.raises(CorpusError):
        encode_documents([], vocab)


def test_vocab_file_round_trip(tmp_path: Path) -> None:
    """A saved vocabulary loads back with the same ids."""
    vocab = build_vocab("the cat saw the dog", max_size=10)
    path = tmp_path / "vocab.json"
    save_vocab(vocab, path)
    loaded = load_vocab(path)
    assert loaded.tokens == vocab.tokens
    with pytest.raises(CorpusError, match="cannot read vocabulary"):
        load_vocab(tmp_path / "missing.json")


def test_missing_corpus(tmp_path: Path) -> None:
    """Unreadable corpora raise CorpusError."""
    with pytest.raises(CorpusError, match="cannot read corpus"):
        read_text(tmp_path / "absent.txt")


def test_sampler_is_deterministic_and_restorable() -> None:
    """The same seed draws the same batches, and restoring state replays them."""
    stream = np.arange(100)
    a = BatchSampler(stream, 9, 4, seed=3)
    b = sample_training_batches(stream, 9, 4, seed=3)
    first = next(a)
    np.testing.assert_array_equal(first, next(b))
    assert first.shape == (4, 9)
    # Chunks are contiguous runs of the stream
    assert (np.diff(first, axis=1) == 1).all()
    state = a.state()
    expected = [next(a) for _ in range(3)]
    a.restore(state)
    for batch in expected:
        np.testing.assert_array_equal(next(a), batch)


def test_sampler_starts_are_uniform() -> None:
    """Chunk starts cover every valid offset with equal frequency (chi-squared, 29 dof)."""
    sampler = BatchSampler(np.arange(40), 11, batch_size=100, seed=3)
    starts = np.concatenate([next(sampler)[:, 0] for _ in range(300)])
    counts = np.bincount(starts, minlength=30)
    assert counts.shape == (30,)
    assert counts.min() > 0
    expected = len(starts) / 30
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    # 99.9th percentile of chi-squared with 29 degrees of freedom
    assert chi2 < 58.3


def test_sampler_needs_one_chunk() -> None:
    """A stream shorter than one chunk cannot be sampled."""
    with pytest.raises(CorpusError, match="shorter than one chunk"):
        BatchSampler(np.arange(5), 6, 1)


@pytest.mark.parametrize(("n", "window", "stride", "offset"), [(20, 8, 3, 1), (50, 16, 8, 1), (7, 16, 8, 1), (40, 16, 4, 4)])
def test_sliding_windows_score_each_target_once(n: int, window: int, stride: int, offset: int) -> None:
    """Every target from the offset on is scored once, always with at least ``offset`` tokens of context."""
    windows = sliding_eval(np.arange(n), window, stride, offset)
    scored = [t for w in windows for t in range(w.score_from, w.end)]
    assert scored == list(range(offset, n))
    for w in windows:
        assert w.end - w.start <= window
        assert w.score_from - w.start >= offset
        assert w.scored == w.end - w.score_from


def test_sliding_window_edge_cases() -> None:
    """Too-short inputs give no windows; a stride past the window is rejected."""
    assert sliding_eval([5], 8, 4) == []
    with pytest.raises(ValueError, match="stride"):
        sliding_eval(np.arange(20), 8, 8)


def test_unigram_perplexity() -> None:
    """Add-one smoothing over the vocabulary, <bos> excluded from the targets."""
    train = np.array([BOS, 2, 2, 3])
    heldout = np.array([BOS, 2, 3])
    expected = math.exp(-(math.log(3 / 8) + math.log(2 / 8)) / 2)
    assert unigram_perplexity(train, heldout, 4) == pytest.approx(expected)
    with pytest.raises(CorpusError):
        unigram_perplexity(train, np.array([BOS]), 4)


def test_word_level_renormalize() -> None:
    """Word perplexity spreads the total NLL over words."""
    assert word_level_renormalize(10 * math.log(2), 5) == pytest.approx(4.0)
    with pytest.raises(ValueError):
        word_level_renormalize(1.0, 0)


def test_counts() -> None:
    """Token counts cover the whole vocabulary; <bos> is not a word."""
    ids = np.array([BOS, 5, 6, BOS, 7])
    assert count_words(ids) == 3
    assert token_counts(ids, 9).tolist() == [0, 2, 0, 0, 0, 1, 1, 1, 0]
