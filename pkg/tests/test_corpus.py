import numpy as np
import pytest

from slider_quant.core.errors import ConfigError, ContractError
from slider_quant.model.corpus import (DEFAULT_CORPUS, CharTokenizer, build_stream, load_text, make_calibset,
                                       unigram_perplexity)


def test_tokenizer_round_trip():
    tokenizer = CharTokenizer.from_text("hello world")
    assert tokenizer.alphabet == " dehlorw"
    ids = tokenizer.encode("low")
    assert ids.tolist() == [4, 5, 7]
    assert tokenizer.decode(ids) == "low"


def test_tokenizer_rejects_unknown_characters():
    with pytest.raises(ContractError):
        CharTokenizer.from_text("abc").encode("abd")


def test_build_stream_splits():
    stream, tokenizer = build_stream("abcdefghij" * 10, train_fraction=0.8)
    assert tokenizer.vocab_size == 10
    assert len(stream.split("train")) == 80
    assert len(stream.split("test")) == 20
    with pytest.raises(ContractError):
        stream.split("valid")
    with pytest.raises(ConfigError):
        build_stream("abc", train_fraction=1.0)


def test_bundled_corpus_loads():
    stream, tokenizer = build_stream(load_text(DEFAULT_CORPUS))
    assert tokenizer.vocab_size > 10
    assert len(stream.split("test")) > 0


def test_missing_corpus(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_text(tmp_path / "missing.txt")


def test_calibset_offsets_are_distinct(corpus_ids):
    calib = make_calibset(corpus_ids, c=16, k=8, seed=3)
    assert calib.tokens.shape == (16, 8)
    assert len(set(calib.offsets.tolist())) == 16
    for offset, row in zip(calib.offsets, calib.tokens):
        np.testing.assert_array_equal(row, corpus_ids[offset:offset + 8])


def test_calibset_is_seeded(corpus_ids):
    first = make_calibset(corpus_ids, c=4, k=8, seed=9)
    second = make_calibset(corpus_ids, c=4, k=8, seed=9)
    np.testing.assert_array_equal(first.offsets, second.offsets)


def test_calibset_needs_enough_offsets():
    with pytest.raises(ContractError):
        make_calibset(np.arange(10), c=4, k=8, seed=0)
    with pytest.raises(ContractError):
        make_calibset(np.arange(10), c=0, k=2, seed=0)


def test_unigram_perplexity_of_uniform_text():
    ids = np.tile(np.arange(4), 25)
    assert unigram_perplexity(ids, ids, 4) == pytest.approx(4.0)
