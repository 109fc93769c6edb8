"""Gold-span derivation: diff a generated caption against its corrected form.

The diff is a minimal edit script under an LCS objective on token texts.
Every generated-side token that a corrector replaced or deleted is marked
hallucinated; runs of marked tokens merge into spans. Pure insertions (words
the corrector added with no counterpart) anchor to the preceding token so the
mark stays token-indexable.
"""

from __future__ import annotations

from dataclasses import dataclass

from .corpus import Dimension, HallucinationSpan
from .text import TokenizedCaption

KEEP = "keep"
REPLACE = "replace"
DELETE = "delete"
INSERT = "insert"


@dataclass(frozen=True)
class EditOp:
    """One edit over token ranges of g (generated) and c (corrected).

    keep/replace carry both ranges; delete has an empty c-range at the current
    c position; insert has an empty g-range at the g position the new tokens
    land in front of.
    """

    kind: str
    g_start: int
    g_end: int
    c_start: int
    c_end: int


@dataclass(frozen=True)
class EditScript:
    ops: tuple[EditOp, ...]
    g_len: int
    c_len: int


_NEG = -(1 << 60)


def diff_tokens(g: TokenizedCaption, c: TokenizedCaption) -> EditScript:
    """Minimal token-level edit script turning g into c.

    Primary objective: a maximum number of kept tokens (an LCS alignment).
    Among maximum alignments the one with the fewest gap blocks (maximal runs
    of non-keep edits) wins; an alignment that grabs the wrong partner among
    repeated words needs an extra block, so this keeps aligned runs contiguous
    and avoids insert ops that would mark an innocent neighboring token.
    Remaining ties resolve by a fixed forward preference (keep, then consume
    g, then consume c), making the output deterministic.
    """
    gt = [t.text for t in g.tokens]
    ct = [t.text for t in c.tokens]
    m, n = len(gt), len(ct)
    w = m + n + 2  # one kept token outweighs any possible block count

    # value = w * kept - blocks over the suffix (i:, j:), maximized.
    # vk: previous op was a keep (or the start), so a gap move opens a block;
    # vg: already inside a gap, so a gap move continues it for free.
    vk = [[0] * (n + 1) for _ in range(m + 1)]
    vg = [[0] * (n + 1) for _ in range(m + 1)]
    for j in range(n - 1, -1, -1):
        vk[m][j] = -1
    for i in range(m - 1, -1, -1):
        vk[i][n] = -1
        row_k, row_g = vk[i], vg[i]
        below_k, below_g = vk[i + 1], vg[i + 1]
        gi = gt[i]
        for j in range(n - 1, -1, -1):
            keep_val = w + below_k[j + 1] if gi == ct[j] else _NEG
            a, b = below_g[j], row_g[j + 1]
            gap_best = a if a >= b else b
            row_g[j] = keep_val if keep_val >= gap_best else gap_best
            gap_open = gap_best - 1
            row_k[j] = keep_val if keep_val >= gap_open else gap_open

    steps: list[str] = []
    i = j = 0
    entered = True
    while i < m or j < n:
        cur = vk[i][j] if entered else vg[i][j]
        if i < m and j < n and gt[i] == ct[j] and cur == w + vk[i + 1][j + 1]:
            steps.append("k")
            i += 1
            j += 1
            entered = True
            continue
        open_cost = 1 if entered else 0
        if i < m and cur == vg[i + 1][j] - open_cost:
            steps.append("g")
            i += 1
        else:
            steps.append("c")
            j += 1
        entered = False

    ops: list[EditOp] = []
    i = j = 0
    pos = 0
    while pos < len(steps):
        if steps[pos] == "k":
            ki, kj = i, j
            while pos < len(steps) and steps[pos] == "k":
                i += 1
                j += 1
                pos += 1
            ops.append(EditOp(KEEP, ki, i, kj, j))
        else:
            bi, bj = i, j
            while pos < len(steps) and steps[pos] != "k":
                if steps[pos] == "g":
                    i += 1
                else:
                    j += 1
                pos += 1
            if bi < i and bj < j:
                ops.append(EditOp(REPLACE, bi, i, bj, j))
            elif bi < i:
                ops.append(EditOp(DELETE, bi, i, j, j))
            else:
                ops.append(EditOp(INSERT, i, i, bj, j))
    return EditScript(ops=tuple(ops), g_len=m, c_len=n)


def extract_gold_spans(script: EditScript) -> list[HallucinationSpan]:
    """Mark hallucinated g tokens from an edit script and merge into spans.

    Replace and delete ranges are marked directly. An insert marks the g token
    just before the insertion point, or token 0 for an insertion at the start;
    with an empty g there is nothing to mark. Dimension defaults to `other`
    until a labeling pass assigns real categories.
    """
    marked: set[int] = set()
    for op in script.ops:
        if op.kind in (REPLACE, DELETE):
            marked.update(range(op.g_start, op.g_end))
        elif op.kind == INSERT and script.g_len > 0:
            marked.add(op.g_start - 1 if op.g_start > 0 else 0)
    spans: list[HallucinationSpan] = []
    start = prev = None
    for idx in sorted(marked):
        if start is None:
            start = prev = idx
        elif idx == prev + 1:
            prev = idx
        else:
            spans.append(HallucinationSpan(start, prev + 1, Dimension.OTHER.value))
            start = prev = idx
    if start is not None:
        spans.append(HallucinationSpan(start, prev + 1, Dimension.OTHER.value))
    return spans


def label_spans(
    spans: list[HallucinationSpan], labels: list[Dimension | str]
) -> list[HallucinationSpan]:
    """Pair each span with its category, preserving order."""
    if len(spans) != len(labels):
        raise ValueError(
            f"label_spans: {len(spans)} spans but {len(labels)} labels"
        )
    return [
        HallucinationSpan(s.start, s.end, str(Dimension(label).value))
        for s, label in zip(spans, labels)
    ]
