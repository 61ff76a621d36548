"""Tokenizer tests: greedy matching, layout, truncation, round trips."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kdforge.errors import ConfigError, InputError, VocabError
from kdforge.tokenizer import (
    CLS_ID,
    PAD_ID,
    RESERVED_PIECES,
    SEP_ID,
    UNK_ID,
    Vocabulary,
    build_vocab,
    decode,
    encode,
)


def make_vocab(extra):
    return Vocabulary(list(RESERVED_PIECES) + list(extra))


def test_greedy_longest_match_splits_unable():
    vocab = make_vocab(["un", "##able", "able", "un##", "u"])
    seq = encode("unable", vocab, max_len=8)
    pieces = [vocab.piece_for(i) for i in seq.ids if i != PAD_ID]
    assert pieces == ["[CLS]", "un", "##able", "[SEP]"]


def test_longest_match_prefers_whole_word():
    vocab = make_vocab(["unable", "un", "##able"])
    seq = encode("unable", vocab, max_len=8)
    assert vocab.piece_for(seq.ids[1]) == "unable"


def test_unknown_word_becomes_single_unk():
    vocab = make_vocab(["hello"])
    seq = encode("hello zzz", vocab, max_len=8)
    non_pad = [i for i in seq.ids if i != PAD_ID]
    assert non_pad == [CLS_ID, vocab.lookup("hello"), UNK_ID, SEP_ID]


def test_empty_text_layout():
    vocab = make_vocab(["a"])
    seq = encode("", vocab, max_len=10)
    assert seq.ids[:2] == [CLS_ID, SEP_ID]
    assert sum(seq.attention_mask) == 2
    assert len(seq.ids) == 10
    assert all(i == PAD_ID for i in seq.ids[2:])


def test_lowercasing_and_punctuation_split():
    vocab = make_vocab(["good", "movie", "!"])
    seq = encode("Good MOVIE!", vocab, max_len=10)
    pieces = [vocab.piece_for(i) for i in seq.ids if i != PAD_ID]
    assert pieces == ["[CLS]", "good", "movie", "!", "[SEP]"]


def test_pair_layout_and_type_ids():
    vocab = make_vocab(["a", "b"])
    seq = encode("a", vocab, max_len=8, text_b="b")
    assert seq.ids[:5] == [CLS_ID, vocab.lookup("a"), SEP_ID, vocab.lookup("b"), SEP_ID]
    # type 0 through the first SEP inclusive, then 1 for segment B
    assert seq.type_ids[:5] == [0, 0, 0, 1, 1]
    assert seq.type_ids[5:] == [0, 0, 0]


def test_pair_truncation_longest_first_keeps_both_segments():
    vocab = make_vocab(["x", "y"])
    seq = encode("x x x x x x", vocab, max_len=7, text_b="y y")
    assert seq.overflow
    ids = [i for i in seq.ids if i != PAD_ID]
    # budget 4 pieces: longest-first trims segment A down
    assert ids.count(vocab.lookup("x")) == 2
    assert ids.count(vocab.lookup("y")) == 2
    assert ids.count(SEP_ID) == 2


def test_single_truncation_sets_overflow():
    vocab = make_vocab(["w"])
    seq = encode(" ".join(["w"] * 50), vocab, max_len=8)
    assert seq.overflow
    assert len(seq.ids) == 8
    assert sum(seq.attention_mask) == 8


def test_encode_requires_min_length():
    vocab = make_vocab(["a"])
    with pytest.raises(ConfigError):
        encode("a", vocab, max_len=2)
    with pytest.raises(ConfigError):
        encode("a", vocab, max_len=4, text_b="b")


@settings(max_examples=250, deadline=None)
@given(st.text(alphabet="abcdef gh.,", max_size=60), st.integers(8, 24))
def test_attention_mask_matches_non_pad_count(text, max_len):
    vocab = make_vocab(["a", "b", "c", "ab", "##b", "##c", ".", ","])
    seq = encode(text, vocab, max_len=max_len)
    assert len(seq.ids) == max_len
    assert len(seq.attention_mask) == max_len
    non_pad = sum(1 for i in seq.ids if i != PAD_ID)
    assert non_pad == sum(seq.attention_mask)
    for i, m in zip(seq.ids, seq.attention_mask):
        assert (m == 0) == (i == PAD_ID)


def test_encode_deterministic():
    vocab = make_vocab(["foo", "bar", "##r"])
    a = encode("foo bar", vocab, max_len=12)
    b = encode("foo bar", vocab, max_len=12)
    assert a.ids == b.ids and a.type_ids == b.type_ids


# ---------------------------------------------------------------------------
# vocabulary building
# ---------------------------------------------------------------------------


def test_build_vocab_frequency_order():
    vocab = build_vocab(["a a b"], target_size=7)
    assert vocab.pieces.index("a") < vocab.pieces.index("b")
    assert vocab.size == 7


def test_build_vocab_reserved_only_boundary():
    vocab = build_vocab(["a a b"], target_size=5)
    assert vocab.pieces == list(RESERVED_PIECES)


def test_build_vocab_empty_corpus():
    with pytest.raises(InputError):
        build_vocab([], target_size=10)


def test_build_vocab_deterministic_across_runs():
    lines = [f"word{i % 7} tok{i % 3} shared" for i in range(20)]
    first = build_vocab(lines, target_size=50)
    for _ in range(4):
        assert build_vocab(lines, target_size=50).pieces == first.pieces


def test_build_vocab_min_frequency():
    vocab = build_vocab(["rare common common common"], target_size=40, min_frequency=2)
    assert vocab.lookup("common") is not None
    assert vocab.lookup("rare") is None


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------


def test_decode_joins_continuations():
    vocab = make_vocab(["un", "##able"])
    assert decode([vocab.lookup("un"), vocab.lookup("##able")], vocab) == "unable"


def test_decode_all_pad_is_empty():
    vocab = make_vocab(["x"])
    assert decode([PAD_ID] * 6, vocab) == ""


def test_decode_out_of_range():
    vocab = make_vocab(["x"])
    with pytest.raises(VocabError):
        decode([vocab.size], vocab)


def test_decode_encode_round_trip_over_whole_words():
    lines = ["alpha beta gamma delta", "beta beta epsilon", "zeta alpha"]
    vocab = build_vocab(lines, target_size=60)
    for piece in vocab.pieces:
        if piece in RESERVED_PIECES or piece.startswith("##"):
            continue
        if len(piece) == 0:
            continue
        seq = encode(piece, vocab, max_len=16)
        assert decode(seq.ids, vocab) == piece


def test_vocab_file_round_trip(tmp_path):
    vocab = build_vocab(["one two three two"], target_size=20)
    path = tmp_path / "vocab.txt"
    vocab.save(path)
    loaded = Vocabulary.load(path)
    assert loaded.pieces == vocab.pieces
    # lookup and piece_for are inverse bijections over dense ids
    for i, piece in enumerate(loaded.pieces):
        assert loaded.lookup(piece) == i
        assert loaded.piece_for(i) == piece
