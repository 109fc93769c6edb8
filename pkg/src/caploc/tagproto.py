"""Inline tag protocol for marking hallucinated spans in caption text.

Spans are wrapped in the literal tags <HALLUCINATION> and </HALLUCINATION>,
matched exactly and case-sensitively. Parsing works in UTF-8 byte space (the
tags are pure ASCII, so they cannot collide with multibyte sequences) and
never fails: malformed tagging is repaired deterministically and recorded as
a status instead.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .corpus import HallucinationSpan
from .diffannot import KEEP, diff_tokens
from .text import TokenizedCaption, token_equal_sequence, tokenize

OPEN_TAG = "<HALLUCINATION>"
CLOSE_TAG = "</HALLUCINATION>"

_OPEN = OPEN_TAG.encode()
_CLOSE = CLOSE_TAG.encode()


class ParseStatus(str, Enum):
    OK = "ok"
    MALFORMED_TAGS = "malformed_tags"
    EMPTY = "empty"


@dataclass(frozen=True)
class TaggedText:
    raw: str


@dataclass(frozen=True)
class ParsedOutput:
    """Tag-stripped text, byte ranges (into the stripped text) that were
    inside tags, and the parse status."""

    stripped: str
    marked_ranges: tuple[tuple[int, int], ...]
    status: ParseStatus


@dataclass(frozen=True)
class ModelOutput:
    """Verbatim model response kept for audit, with its parse status."""

    sample_id: str
    raw: str
    status: ParseStatus


@dataclass(frozen=True)
class Prediction:
    """Predicted hallucinated token indices against a reference caption."""

    indices: frozenset[int]
    faithful: bool
    alignment_coverage: float


def serialize_tags(c: TokenizedCaption, spans: list[HallucinationSpan]) -> TaggedText:
    """Wrap each span's tokens in tags, leaving all other bytes untouched."""
    n = len(c.tokens)
    prev_end = 0
    for i, span in enumerate(spans):
        if not (0 <= span.start < span.end <= n):
            raise ValueError(f"serialize_tags: span {i} [{span.start}, {span.end}) invalid for {n} tokens")
        if span.start < prev_end:
            raise ValueError(f"serialize_tags: span {i} overlaps or is out of order")
        prev_end = span.end
    out: list[str] = []
    pos = 0
    for span in spans:
        open_at = c.tokens[span.start].char_start
        close_at = c.tokens[span.end - 1].char_end
        out.append(c.source[pos:open_at])
        out.append(OPEN_TAG)
        out.append(c.source[open_at:close_at])
        out.append(CLOSE_TAG)
        pos = close_at
    out.append(c.source[pos:])
    return TaggedText("".join(out))


def parse_tags(t: TaggedText | str) -> ParsedOutput:
    """Strip tags, returning the plain text and the byte ranges they covered.

    Repair rules for malformed tagging, applied deterministically: an open tag
    with no close extends to the end of the text; a close tag with no open is
    dropped; a nested open is dropped while the outer region stays open. Any
    repair sets status to malformed_tags. Zero-width regions are discarded.
    """
    raw = (t.raw if isinstance(t, TaggedText) else t).encode("utf-8")
    events: list[tuple[int, bytes]] = []
    for tag in (_OPEN, _CLOSE):
        start = 0
        while True:
            pos = raw.find(tag, start)
            if pos < 0:
                break
            events.append((pos, tag))
            start = pos + len(tag)
    events.sort()

    out = bytearray()
    ranges: list[tuple[int, int]] = []
    malformed = False
    depth = 0
    region_start = 0
    pos = 0
    for at, tag in events:
        out.extend(raw[pos:at])
        pos = at + len(tag)
        if tag == _OPEN:
            if depth == 0:
                region_start = len(out)
            else:
                malformed = True
            depth += 1
        else:
            if depth == 0:
                malformed = True
            else:
                depth -= 1
                if depth == 0 and len(out) > region_start:
                    ranges.append((region_start, len(out)))
    out.extend(raw[pos:])
    if depth > 0:
        malformed = True
        if len(out) > region_start:
            ranges.append((region_start, len(out)))

    stripped = out.decode("utf-8")
    if malformed:
        status = ParseStatus.MALFORMED_TAGS
    elif not stripped.strip():
        status = ParseStatus.EMPTY
    else:
        status = ParseStatus.OK
    return ParsedOutput(stripped=stripped, marked_ranges=tuple(ranges), status=status)


def marked_token_indices(
    tc: TokenizedCaption, ranges: tuple[tuple[int, int], ...]
) -> set[int]:
    # a token partially covered by a range counts as marked
    marked: set[int] = set()
    for tok in tc.tokens:
        for r_start, r_end in ranges:
            if tok.byte_start < r_end and r_start < tok.byte_end:
                marked.add(tok.index)
                break
    return marked


def align_to_reference(
    stripped: str,
    marked_ranges: tuple[tuple[int, int], ...] | list[tuple[int, int]],
    ref: TokenizedCaption,
) -> Prediction:
    """Map marked byte ranges onto reference token indices.

    A faithful output (token sequence identical to the reference) maps
    positionally. Otherwise the output tokens are aligned to the reference by
    the same diff engine used for gold annotation; marks on tokens the
    alignment cannot place are dropped. Coverage is the fraction of output
    tokens the alignment placed; an empty output against a non-empty
    reference counts as zero coverage.
    """
    ranges = tuple(marked_ranges)
    out_tc = tokenize(stripped)
    if token_equal_sequence(out_tc, ref):
        return Prediction(
            indices=frozenset(marked_token_indices(out_tc, ranges)),
            faithful=True,
            alignment_coverage=1.0,
        )

    marked_out = marked_token_indices(out_tc, ranges)
    script = diff_tokens(out_tc, ref)
    indices: set[int] = set()
    aligned = 0
    for op in script.ops:
        if op.kind != KEEP:
            continue
        aligned += op.g_end - op.g_start
        for offset in range(op.g_end - op.g_start):
            if op.g_start + offset in marked_out:
                indices.add(op.c_start + offset)
    if len(out_tc) > 0:
        coverage = aligned / len(out_tc)
    else:
        coverage = 1.0 if len(ref) == 0 else 0.0
    return Prediction(
        indices=frozenset(indices), faithful=False, alignment_coverage=coverage
    )


def parse_prediction(sample_id: str, raw: str, ref: TokenizedCaption) -> tuple[ModelOutput, Prediction]:
    """Full pipeline for one model response: parse tags, then align."""
    parsed = parse_tags(raw)
    output = ModelOutput(sample_id=sample_id, raw=raw, status=parsed.status)
    return output, align_to_reference(parsed.stripped, parsed.marked_ranges, ref)
