"""WordPiece-style subword tokenizer.

Greedy longest-match against a vocabulary whose continuation pieces carry
a ``##`` prefix.  Text is lowercased, split on whitespace, and punctuation
is split off as single-character tokens; there is no further Unicode
normalization.  A word with no full segmentation becomes a single ``[UNK]``.

Encoded sequences are always exactly ``max_len`` ids long, laid out as
``[CLS] A [SEP]`` or ``[CLS] A [SEP] B [SEP]`` and padded with ``[PAD]``
(id 0).  Pairs that overflow are truncated longest-first, one piece at a
time from the end of the currently longer segment.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field

from .errors import ConfigError, InputError, VocabError

PAD_ID = 0
UNK_ID = 1
CLS_ID = 2
SEP_ID = 3
MASK_ID = 4

RESERVED_PIECES = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")

_PUNCT_SPLIT = re.compile(r"([^\w]|_)", re.UNICODE)


def _pretokenize(text: str) -> list[str]:
    """Lowercase, whitespace-split, then break punctuation into own tokens."""
    words = []
    for chunk in text.lower().split():
        for part in _PUNCT_SPLIT.split(chunk):
            if part and not part.isspace():
                words.append(part)
    return words


@dataclass
class Vocabulary:
    """Ordered piece list; line number in the vocab file is the id."""

    pieces: list[str]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if list(self.pieces[: len(RESERVED_PIECES)]) != list(RESERVED_PIECES):
            raise InputError(
                "vocabulary must start with the reserved pieces "
                + ", ".join(RESERVED_PIECES)
            )
        self.index = {p: i for i, p in enumerate(self.pieces)}
        if len(self.index) != len(self.pieces):
            raise InputError("vocabulary contains duplicate pieces")

    @property
    def size(self) -> int:
        return len(self.pieces)

    def lookup(self, piece: str) -> int | None:
        return self.index.get(piece)

    def piece_for(self, token_id: int) -> str:
        if not 0 <= token_id < self.size:
            raise VocabError(f"token id {token_id} outside vocabulary of size {self.size}")
        return self.pieces[token_id]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for piece in self.pieces:
                f.write(piece + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            pieces = [line.rstrip("\n") for line in f if line.rstrip("\n")]
        return cls(pieces)


@dataclass
class TokenizedSequence:
    """Fixed-length encoding of one text (or text pair)."""

    ids: list[int]
    attention_mask: list[int]
    type_ids: list[int]
    overflow: bool = False

    def __len__(self) -> int:
        return len(self.ids)


def build_vocab(
    corpus_lines, target_size: int, min_frequency: int = 1
) -> Vocabulary:
    """Frequency-ordered vocabulary over whole words plus character pieces.

    Candidates are each whole word, its first character, and ``##c`` for
    every later character, all weighted by word frequency.  Ties are broken
    lexicographically so the result is deterministic for a given corpus.
    """
    if target_size < len(RESERVED_PIECES):
        raise ConfigError(
            f"target size {target_size} below reserved count {len(RESERVED_PIECES)}"
        )
    word_counts: Counter[str] = Counter()
    n_lines = 0
    for line in corpus_lines:
        n_lines += 1
        word_counts.update(_pretokenize(line))
    if n_lines == 0 or not word_counts:
        raise InputError("cannot build a vocabulary from an empty corpus")

    piece_counts: Counter[str] = Counter()
    for word, count in word_counts.items():
        piece_counts[word] += count
        piece_counts[word[0]] += count
        for ch in word[1:]:
            piece_counts["##" + ch] += count

    ranked = sorted(
        (p for p, c in piece_counts.items() if c >= min_frequency),
        key=lambda p: (-piece_counts[p], p),
    )
    pieces = list(RESERVED_PIECES)
    for piece in ranked:
        if len(pieces) >= target_size:
            break
        if piece not in RESERVED_PIECES:
            pieces.append(piece)
    return Vocabulary(pieces)


def _wordpiece(word: str, vocab: Vocabulary) -> list[int]:
    """Greedy longest-match split; the whole word maps to UNK on failure."""
    ids = []
    start = 0
    while start < len(word):
        end = len(word)
        found = None
        while start < end:
            piece = word[start:end]
            if start > 0:
                piece = "##" + piece
            pid = vocab.lookup(piece)
            if pid is not None:
                found = pid
                break
            end -= 1
        if found is None:
            return [UNK_ID]
        ids.append(found)
        start = end
    return ids


def encode(
    text_a: str,
    vocab: Vocabulary,
    max_len: int,
    text_b: str | None = None,
) -> TokenizedSequence:
    if max_len < 3:
        raise ConfigError(f"max_len must be at least 3, got {max_len}")
    if text_b is not None and max_len < 5:
        raise ConfigError(
            f"pair inputs need max_len >= 5 for [CLS] a [SEP] b [SEP], got {max_len}"
        )

    pieces_a = [pid for w in _pretokenize(text_a) for pid in _wordpiece(w, vocab)]
    pieces_b = (
        [pid for w in _pretokenize(text_b) for pid in _wordpiece(w, vocab)]
        if text_b is not None
        else None
    )

    overflow = False
    if pieces_b is None:
        budget = max_len - 2
        if len(pieces_a) > budget:
            pieces_a = pieces_a[:budget]
            overflow = True
        ids = [CLS_ID] + pieces_a + [SEP_ID]
        sep_pos = len(ids) - 1
    else:
        budget = max_len - 3
        while len(pieces_a) + len(pieces_b) > budget:
            overflow = True
            if len(pieces_a) >= len(pieces_b):
                pieces_a.pop()
            else:
                pieces_b.pop()
        ids = [CLS_ID] + pieces_a + [SEP_ID] + pieces_b + [SEP_ID]
        sep_pos = 1 + len(pieces_a)

    attention = [1] * len(ids)
    type_ids = [0 if i <= sep_pos else 1 for i in range(len(ids))]
    pad = max_len - len(ids)
    ids += [PAD_ID] * pad
    attention += [0] * pad
    type_ids += [0] * pad
    return TokenizedSequence(ids, attention, type_ids, overflow)


def decode(ids, vocab: Vocabulary) -> str:
    """Inverse of encode up to casing: drop specials, rejoin continuations."""
    words: list[str] = []
    for token_id in ids:
        piece = vocab.piece_for(int(token_id))
        if piece in RESERVED_PIECES:
            continue
        if piece.startswith("##") and words:
            words[-1] += piece[2:]
        elif piece.startswith("##"):
            words.append(piece[2:])
        else:
            words.append(piece)
    return " ".join(words)
