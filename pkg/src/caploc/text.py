"""Deterministic, offset-preserving tokenization and sentence segmentation.

Tokens are word-level: input is split on Unicode whitespace, then leading and
trailing punctuation characters (Unicode categories P*) are detached as
separate single-character tokens. Internal punctuation (hyphens, apostrophes,
version dots) stays attached. Gold annotations are stored as indices into this
token sequence, so any rule change here must bump TOKENIZER_VERSION.
"""

from __future__ import annotations

import re
import unicodedata
from dataclasses import dataclass, field

TOKENIZER_VERSION = "dvb-tok/1"

_CHUNK_RE = re.compile(r"\S+")
_TERMINATORS = (".", "!", "?")


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def _utf8_len(ch: str) -> int:
    cp = ord(ch)
    if cp < 0x80:
        return 1
    if cp < 0x800:
        return 2
    if cp < 0x10000:
        return 3
    return 4


@dataclass(frozen=True)
class Token:
    """One token with byte offsets into the UTF-8 encoding of the source.

    char_start/char_end are the corresponding code-point offsets, kept so the
    source string can be sliced without re-encoding.
    """

    text: str
    byte_start: int
    byte_end: int
    index: int
    char_start: int
    char_end: int


@dataclass(frozen=True)
class TokenizedCaption:
    source: str
    tokens: tuple[Token, ...]

    def __len__(self) -> int:
        return len(self.tokens)

    def texts(self) -> tuple[str, ...]:
        return tuple(t.text for t in self.tokens)


@dataclass(frozen=True)
class Sentence:
    """A sentence as byte range plus the contiguous token index range it owns."""

    byte_start: int
    byte_end: int
    token_start: int
    token_end: int

    @property
    def token_indices(self) -> range:
        return range(self.token_start, self.token_end)


@dataclass(frozen=True)
class SentenceIndex:
    sentences: tuple[Sentence, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.sentences)

    def sentence_of(self, token_index: int) -> int:
        """Return the index of the sentence containing token_index."""
        for j, s in enumerate(self.sentences):
            if s.token_start <= token_index < s.token_end:
                return j
        raise IndexError(f"token index {token_index} not covered by any sentence")


def tokenize(text: str) -> TokenizedCaption:
    """Split text into word-level tokens with exact byte offsets.

    Deterministic: whitespace split, then leading/trailing punctuation
    characters become their own tokens. Concatenating token texts with the
    original inter-token bytes reconstructs the source exactly.
    """
    spans: list[tuple[int, int]] = []
    for m in _CHUNK_RE.finditer(text):
        start = m.start()
        chunk = m.group()
        i, j = 0, len(chunk)
        while i < j and _is_punct(chunk[i]):
            spans.append((start + i, start + i + 1))
            i += 1
        k = j
        while k > i and _is_punct(chunk[k - 1]):
            k -= 1
        if k > i:
            spans.append((start + i, start + k))
        for t in range(k, j):
            spans.append((start + t, start + t + 1))

    if text.isascii():
        tokens = tuple(
            Token(text[cs:ce], cs, ce, idx, cs, ce)
            for idx, (cs, ce) in enumerate(spans)
        )
    else:
        byte_at = [0] * (len(text) + 1)
        acc = 0
        for pos, ch in enumerate(text):
            acc += _utf8_len(ch)
            byte_at[pos + 1] = acc
        tokens = tuple(
            Token(text[cs:ce], byte_at[cs], byte_at[ce], idx, cs, ce)
            for idx, (cs, ce) in enumerate(spans)
        )
    return TokenizedCaption(source=text, tokens=tokens)


def _is_boundary_after(tc: TokenizedCaption, token_index: int) -> bool:
    tok = tc.tokens[token_index]
    if not tok.text.endswith(_TERMINATORS):
        return False
    pos = tok.char_end
    src = tc.source
    n = len(src)
    saw_space = False
    while pos < n and src[pos].isspace():
        saw_space = True
        pos += 1
    if pos >= n:
        return True
    return saw_space and src[pos].isupper()


def split_sentences(tc: TokenizedCaption) -> SentenceIndex:
    """Segment a tokenized caption into sentences.

    A boundary falls after a token ending with '.', '!' or '?' when the
    source continues with whitespace and an uppercase letter, or ends there.
    Trailing material without a terminator forms a final sentence.
    """
    if not tc.tokens:
        return SentenceIndex()
    sentences: list[Sentence] = []
    start = 0
    for i in range(len(tc.tokens)):
        if _is_boundary_after(tc, i):
            sentences.append(
                Sentence(
                    byte_start=tc.tokens[start].byte_start,
                    byte_end=tc.tokens[i].byte_end,
                    token_start=start,
                    token_end=i + 1,
                )
            )
            start = i + 1
    if start < len(tc.tokens):
        sentences.append(
            Sentence(
                byte_start=tc.tokens[start].byte_start,
                byte_end=tc.tokens[-1].byte_end,
                token_start=start,
                token_end=len(tc.tokens),
            )
        )
    return SentenceIndex(tuple(sentences))


def token_equal_sequence(a: TokenizedCaption, b: TokenizedCaption) -> bool:
    """True iff the two token text sequences match exactly (case-sensitive).

    Inter-token whitespace differences do not matter; casing does.
    """
    return a.texts() == b.texts()
