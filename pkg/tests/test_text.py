"""Vocabulary construction, tokenization, and content embeddings."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tworank.autodiff import Tensor
from tworank.text import (CLS_ID, PAD_ID, SPECIALS, UNK_ID, Vocab, build_vocab,
                          content_embed, pieces_of, tokenize)

CORPUS = [
    "red anchor classic", "red beacon", "red anchor pro",
    "blue anchor", "blue beacon mini", "red beacon set",
]


def test_special_ids():
    assert (PAD_ID, UNK_ID, CLS_ID) == (0, 1, 2)
    vocab = build_vocab(CORPUS, 40)
    assert vocab.tokens[:3] == SPECIALS


def test_build_is_deterministic():
    a = build_vocab(CORPUS, 40)
    b = build_vocab(CORPUS, 40)
    assert a.tokens == b.tokens


def test_frequent_word_becomes_single_piece():
    vocab = build_vocab(CORPUS, 60)
    assert "red" in vocab
    assert pieces_of("red", vocab) == ["red"]


def test_pieces_reassemble_to_word():
    vocab = build_vocab(CORPUS, 40)
    for word in ("anchor", "beacon", "classic"):
        pieces = pieces_of(word, vocab)
        rebuilt = pieces[0] + "".join(p[2:] for p in pieces[1:])
        assert rebuilt == word
        assert all(p.startswith("##") for p in pieces[1:])


def test_tokenize_lowercases_and_splits():
    vocab = build_vocab(CORPUS, 60)
    assert tokenize("RED Red red", vocab) == [vocab.index["red"]] * 3


def test_uncoverable_word_maps_to_unk():
    vocab = build_vocab(CORPUS, 40)
    assert tokenize("zzz9", vocab) == [UNK_ID]


def test_longest_match_first():
    vocab = build_vocab(CORPUS, 60)
    # "red" exists as one piece; the tokenizer must not fall back to chars
    ids = tokenize("red", vocab)
    assert len(ids) == 1


def test_empty_corpus_rejected():
    with pytest.raises(ValueError):
        build_vocab([], 40)
    with pytest.raises(ValueError):
        build_vocab(["   "], 40)


def test_target_size_below_alphabet_rejected():
    with pytest.raises(ValueError):
        build_vocab(CORPUS, 5)


def test_target_size_cap_respected():
    vocab = build_vocab(CORPUS, 30)
    assert len(vocab) <= 30


def test_save_load_roundtrip(tmp_path):
    vocab = build_vocab(CORPUS, 40)
    path = tmp_path / "vocab.txt"
    vocab.save(path)
    loaded = Vocab.load(path)
    assert loaded.tokens == vocab.tokens
    # one token per line, plain text
    lines = path.read_text().splitlines()
    assert lines[:3] == SPECIALS


def test_vocab_requires_specials_first():
    with pytest.raises(ValueError):
        Vocab(["a", "b", "c"])


def test_unknown_token_lookup():
    vocab = build_vocab(CORPUS, 40)
    assert vocab.id_of("nonexistent-piece") == UNK_ID


# ---------------------------------------------------------------------------
# content embeddings
# ---------------------------------------------------------------------------


def test_content_embed_is_row_sum():
    matrix = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
    out = content_embed([1, 3], matrix)
    assert np.allclose(out.data, matrix.data[1] + matrix.data[3])


def test_content_embed_repeated_id_doubles():
    matrix = Tensor(np.arange(12.0).reshape(4, 3))
    out = content_embed([2, 2], matrix)
    assert np.allclose(out.data, 2.0 * matrix.data[2])


def test_content_embed_empty_sequence_is_zero():
    matrix = Tensor(np.ones((4, 3)))
    out = content_embed([], matrix)
    assert np.array_equal(out.data, np.zeros(3))


def test_content_embed_out_of_range():
    matrix = Tensor(np.ones((4, 3)))
    with pytest.raises((IndexError, ValueError)):
        content_embed([4], matrix)


@given(st.permutations(list(range(5))))
@settings(max_examples=30, deadline=None)
def test_content_embed_order_invariant(perm):
    matrix = Tensor(np.random.default_rng(0).normal(size=(6, 4)))
    base = content_embed(list(range(5)), matrix).data
    permuted = content_embed(perm, matrix).data
    assert np.allclose(base, permuted, atol=1e-12)
