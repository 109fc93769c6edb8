"""Adversarial hallucination injection: an injector model plants errors in a
clean caption, a text-only detector tries to spot them from the caption
alone, detected spans revert to the clean text, and feedback drives further
rounds. What survives becomes synthetic gold annotation.

Injected spans are anchored to clean-caption token ranges and carry their
replacement tokens. The working caption is always re-derived from the clean
caption plus surviving spans, so untagged regions are token-identical to the
clean caption by construction, and reverting a span is simply dropping it.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field, replace as dc_replace
from pathlib import Path

from .corpus import DIMENSION_VALUES, BenchmarkSample, Dimension, HallucinationSpan
from .diffannot import DELETE, INSERT, KEEP, REPLACE, diff_tokens
from .modelgate import ImageAttachment, ModelGate, ModelRequest, Purpose
from .tagproto import TaggedText, marked_token_indices, parse_tags, serialize_tags
from .text import TokenizedCaption, tokenize

logger = logging.getLogger(__name__)

PROMPT_VERSION = "v1"
_ASSET_DIR = Path(__file__).parent / "assets"

_LABELS_PREFIX = "LABELS:"
_QUOTED_RE = re.compile(r'"([^"\n]+)"')


class InjectionError(RuntimeError):
    pass


def load_template(name: str, version: str = PROMPT_VERSION) -> str:
    path = _ASSET_DIR / f"{name}_{version}.txt"
    return path.read_text(encoding="utf-8")


def fill_template(template: str, **values: str) -> str:
    # plain substring replacement: caption text may itself contain braces
    out = template
    for key, value in values.items():
        out = out.replace("{" + key + "}", value)
    return out


@dataclass(frozen=True)
class InjectionConfig:
    rounds: int = 2
    dimensions: tuple[str, ...] = DIMENSION_VALUES
    max_spans: int = 3
    strategy: str = "structured"
    overlap: int = 1
    injector_model: str = "injector"
    detector_model: str = "detector"
    include_image: bool = True

    def __post_init__(self) -> None:
        if self.rounds < 0:
            raise ValueError("InjectionConfig: rounds must be >= 0")
        if self.max_spans < 1:
            raise ValueError("InjectionConfig: max_spans must be >= 1")
        if self.strategy not in ("naive", "structured"):
            raise ValueError(f"InjectionConfig: unknown strategy {self.strategy!r}")
        if self.overlap < 1:
            raise ValueError("InjectionConfig: overlap must be >= 1")
        bad = [d for d in self.dimensions if d not in DIMENSION_VALUES]
        if bad:
            raise ValueError(f"InjectionConfig: unknown dimensions {bad}")


@dataclass(frozen=True)
class InjectedSpan:
    """One planted error, anchored to the clean caption.

    clean_start == clean_end encodes pure added content in front of that
    clean token position; replacement always holds at least one token.
    """

    clean_start: int
    clean_end: int
    replacement: tuple[str, ...]
    dimension: str = Dimension.OTHER.value

    @property
    def identity(self) -> tuple:
        return (self.clean_start, self.clean_end, self.replacement)


@dataclass(frozen=True)
class DetectedSpan:
    start: int
    end: int
    phrase: str
    rationale: str


@dataclass
class RoundLog:
    round: int
    detected: list[DetectedSpan] = field(default_factory=list)
    reverted: list[InjectedSpan] = field(default_factory=list)
    dropped_phrases: list[str] = field(default_factory=list)


@dataclass
class InjectionState:
    clean: TokenizedCaption
    round: int = 0
    spans: list[InjectedSpan] = field(default_factory=list)
    rounds: list[RoundLog] = field(default_factory=list)
    feedback: list[str] = field(default_factory=list)
    reverted_last_round: int = 0
    audit: list[dict] = field(default_factory=list)

    def span_layout(self) -> list[tuple[int, int]]:
        """Token ranges of the spans in current-caption coordinates."""
        layout = []
        offset = 0
        for s in self.spans:
            start = s.clean_start + offset
            layout.append((start, start + len(s.replacement)))
            offset += len(s.replacement) - (s.clean_end - s.clean_start)
        return layout

    def current_text(self) -> str:
        return _render(self.clean, self.spans)

    def current_tokens(self) -> TokenizedCaption:
        return tokenize(self.current_text())

    def tagged_caption(self) -> TaggedText:
        spans = [
            HallucinationSpan(a, b, s.dimension)
            for (a, b), s in zip(self.span_layout(), self.spans)
        ]
        return serialize_tags(self.current_tokens(), spans)


def _render(clean: TokenizedCaption, spans: list[InjectedSpan]) -> str:
    src = clean.source
    parts: list[str] = []
    last = ""

    def emit(text: str) -> None:
        nonlocal last
        if text:
            parts.append(text)
            last = text[-1]

    pos = 0
    for s in spans:
        if s.clean_start < s.clean_end:
            a = clean.tokens[s.clean_start].char_start
            b = clean.tokens[s.clean_end - 1].char_end
        elif s.clean_start < len(clean.tokens):
            a = b = clean.tokens[s.clean_start].char_start
        else:
            a = b = len(src)
        emit(src[pos:a])
        # keep replacement tokens separated from any adjacent text
        if last and not last.isspace():
            emit(" ")
        emit(" ".join(s.replacement))
        if b < len(src) and not src[b].isspace():
            emit(" ")
        pos = b
    emit(src[pos:])
    return "".join(parts)


def _split_labels(response: str) -> tuple[str, list[str]]:
    lines = response.split("\n")
    for i in range(len(lines) - 1, -1, -1):
        stripped = lines[i].strip()
        if stripped.startswith(_LABELS_PREFIX):
            labels = [
                x.strip().lower()
                for x in stripped[len(_LABELS_PREFIX):].split(",")
                if x.strip()
            ]
            trailing = [x for x in lines[i + 1 :] if x.strip()]
            if trailing:
                logger.warning("ignoring %d lines after the label line", len(trailing))
            return "\n".join(lines[:i]).rstrip("\n"), labels
    return response, []


def _parse_injector_response(
    response: str, clean: TokenizedCaption, cfg: InjectionConfig, strict: bool
) -> tuple[list[InjectedSpan], list[str]]:
    """Turn a tagged injector reply into clean-anchored spans.

    In strict mode any edit outside the tagged regions is a problem and
    yields no spans; in fallback mode only spans whose neighborhood aligns
    cleanly with the clean caption are accepted.
    """
    tagged_part, labels = _split_labels(response)
    parsed = parse_tags(tagged_part)
    out_tc = tokenize(parsed.stripped)
    marked = marked_token_indices(out_tc, parsed.marked_ranges)
    script = diff_tokens(out_tc, clean)

    problems: list[str] = []
    op_at: list = [None] * len(out_tc)  # op covering each output token
    insert_positions: set[int] = set()
    for op in script.ops:
        for g in range(op.g_start, op.g_end):
            op_at[g] = op
        if op.kind == INSERT:
            insert_positions.add(op.g_start)
            problems.append(
                f"clean tokens [{op.c_start}, {op.c_end}) missing from the output"
            )
        elif op.kind in (REPLACE, DELETE):
            untagged = [g for g in range(op.g_start, op.g_end) if g not in marked]
            if untagged:
                problems.append(f"untagged output tokens {untagged} differ from the clean caption")

    if strict and problems:
        return [], problems

    # maximal runs of marked output tokens
    runs: list[tuple[int, int]] = []
    for idx in sorted(marked):
        if runs and idx == runs[-1][1]:
            runs[-1] = (runs[-1][0], idx + 1)
        else:
            runs.append((idx, idx + 1))

    def c_position(g: int, end_side: bool) -> int:
        op = op_at[g]
        if op.kind == KEEP:
            return op.c_start + (g - op.g_start) + (1 if end_side else 0)
        return op.c_end if end_side else op.c_start

    spans: list[InjectedSpan] = []
    for a, b in runs:
        ops_in_run = {id(op_at[g]): op_at[g] for g in range(a, b)}.values()
        if all(op.kind == KEEP for op in ops_in_run):
            logger.info("dropping tagged span [%d, %d): text is unchanged", a, b)
            continue
        partial = any(
            op.kind != KEEP
            and any(g not in marked for g in range(op.g_start, op.g_end))
            for op in ops_in_run
        )
        boundary_insert = a in insert_positions or b in insert_positions
        neighbors_kept = (a == 0 or op_at[a - 1].kind == KEEP) and (
            b == len(out_tc) or op_at[b].kind == KEEP
        )
        if partial or boundary_insert or not neighbors_kept:
            problems.append(f"span [{a}, {b}) does not align to the clean caption")
            continue
        spans.append(
            InjectedSpan(
                clean_start=c_position(a, end_side=False),
                clean_end=c_position(b - 1, end_side=True),
                replacement=tuple(t.text for t in out_tc.tokens[a:b]),
            )
        )

    if len(spans) > cfg.max_spans:
        logger.warning(
            "injector produced %d spans; keeping the first %d", len(spans), cfg.max_spans
        )
        spans = spans[: cfg.max_spans]

    labeled: list[InjectedSpan] = []
    for i, s in enumerate(spans):
        label = labels[i] if i < len(labels) else Dimension.OTHER.value
        if label not in DIMENSION_VALUES:
            logger.warning("unknown span label %r, using %r", label, Dimension.OTHER.value)
            label = Dimension.OTHER.value
        labeled.append(dc_replace(s, dimension=label))
    return labeled, problems


def _injector_prompt(state: InjectionState, cfg: InjectionConfig) -> str:
    template = load_template(f"inject_{cfg.strategy}")
    feedback = "\n".join(state.feedback) if state.feedback else "None."
    return fill_template(
        template,
        caption=state.clean.source,
        dimensions=", ".join(cfg.dimensions),
        feedback=feedback,
    )


def inject_round(
    clean_or_state: str | TokenizedCaption | InjectionState,
    cfg: InjectionConfig,
    gate: ModelGate,
    image: ImageAttachment | None = None,
) -> InjectionState:
    """Ask the injector for a tagged caption and fold the result into state.

    The injector always sees the clean caption plus accumulated feedback and
    answers with a complete tagged caption, which replaces the span set. An
    unfaithful answer (edits outside the tags) is retried once with a
    reminder, then salvaged span by span.
    """
    if isinstance(clean_or_state, InjectionState):
        state = clean_or_state
    else:
        tc = clean_or_state if isinstance(clean_or_state, TokenizedCaption) else tokenize(clean_or_state)
        if not tc.tokens:
            raise InjectionError("inject_round: empty caption")
        state = InjectionState(clean=tc)

    prompt = _injector_prompt(state, cfg)
    request = ModelRequest(
        model=cfg.injector_model,
        system="",
        user=prompt,
        purpose=Purpose.INJECT.value,
        image=image if cfg.include_image else None,
    )
    response = gate.complete(request)
    state.audit.append(
        {"phase": "inject", "round": state.round, "prompt": prompt, "response": response.text}
    )
    spans, problems = _parse_injector_response(response.text, state.clean, cfg, strict=True)
    if problems:
        retry_prompt = (
            prompt + "\n\nREMINDER: copy the caption exactly, word for word, outside the tags."
        )
        retry_request = dc_replace(request, user=retry_prompt)
        retry_response = gate.complete(retry_request)
        state.audit.append(
            {
                "phase": "inject_retry",
                "round": state.round,
                "prompt": retry_prompt,
                "response": retry_response.text,
            }
        )
        spans, problems = _parse_injector_response(
            retry_response.text, state.clean, cfg, strict=True
        )
        if problems:
            spans, problems = _parse_injector_response(
                retry_response.text, state.clean, cfg, strict=False
            )
            had_marks = bool(parse_tags(_split_labels(retry_response.text)[0]).marked_ranges)
            if not spans and had_marks:
                raise InjectionError(
                    "injector produced no usable tagged spans after retry: "
                    + "; ".join(problems)
                )
    state.spans = sorted(spans, key=lambda s: (s.clean_start, s.clean_end))
    return state


def detect_round(
    state: InjectionState, cfg: InjectionConfig, gate: ModelGate
) -> list[DetectedSpan]:
    """Show the detector the plain current caption (no image, no tags) and
    ground its quoted phrases as token ranges."""
    if not state.spans:
        raise ValueError("detect_round: no injected spans to detect")
    current = state.current_tokens()
    prompt = fill_template(load_template("detect"), caption=current.source)
    request = ModelRequest(
        model=cfg.detector_model,
        system="",
        user=prompt,
        purpose=Purpose.DETECT.value,
    )
    response = gate.complete(request)
    state.audit.append(
        {"phase": "detect", "round": state.round, "prompt": prompt, "response": response.text}
    )

    detected: list[DetectedSpan] = []
    dropped: list[str] = []
    token_texts = [t.text for t in current.tokens]
    for line in response.text.split("\n"):
        for match in _QUOTED_RE.finditer(line):
            phrase = match.group(1)
            needle = [t.text for t in tokenize(phrase).tokens]
            if not needle:
                continue
            pos = _find_subsequence(token_texts, needle)
            if pos is None:
                dropped.append(phrase)
                logger.info("detector phrase %r not found in caption, dropped", phrase)
                continue
            rationale = (line[: match.start()] + line[match.end() :]).strip(" -:–")
            detected.append(
                DetectedSpan(start=pos, end=pos + len(needle), phrase=phrase, rationale=rationale)
            )
    if dropped:
        state.audit.append({"phase": "detect_dropped", "round": state.round, "phrases": dropped})
    state.audit.append(
        {
            "phase": "detect_grounded",
            "round": state.round,
            "spans": [(d.start, d.end, d.phrase) for d in detected],
        }
    )
    state.rounds.append(RoundLog(round=state.round, detected=detected, dropped_phrases=dropped))
    return detected


def _find_subsequence(haystack: list[str], needle: list[str]) -> int | None:
    limit = len(haystack) - len(needle)
    for i in range(limit + 1):
        if haystack[i : i + len(needle)] == needle:
            return i
    return None


def filter_detected(
    state: InjectionState, detected: list[DetectedSpan], cfg: InjectionConfig
) -> InjectionState:
    """Revert every injected span that shares at least cfg.overlap tokens with
    a detected span; record feedback about what was caught and why."""
    layout = state.span_layout()
    survivors: list[InjectedSpan] = []
    reverted: list[InjectedSpan] = []
    for (a, b), span in zip(layout, state.spans):
        tokens = set(range(a, b))
        hit = None
        for d in detected:
            if len(tokens & set(range(d.start, d.end))) >= cfg.overlap:
                hit = d
                break
        if hit is None:
            survivors.append(span)
        else:
            reverted.append(span)
            state.feedback.append(
                f'Round {state.round + 1}: the phrase "{" ".join(span.replacement)}" '
                f"({span.dimension}) was caught. Reason given: {hit.rationale or hit.phrase}"
            )
    state.spans = survivors
    state.reverted_last_round = len(reverted)
    if state.rounds and state.rounds[-1].round == state.round:
        state.rounds[-1].reverted = reverted
    else:
        state.rounds.append(RoundLog(round=state.round, detected=detected, reverted=reverted))
    state.round += 1
    return state


@dataclass
class InjectionOutcome:
    sample: BenchmarkSample
    state: InjectionState
    no_survivors: bool


def run_adversarial(
    clean: BenchmarkSample,
    cfg: InjectionConfig,
    gate: ModelGate,
    image: ImageAttachment | None = None,
) -> InjectionOutcome:
    """Full loop: initial injection, then rounds of detect + filter with
    feedback-driven re-injection. rounds=0 means inject once and keep all.

    Zero survivors is not an error: the sample comes back with empty gold
    spans, flagged, usable as a clean negative control.
    """
    state = inject_round(clean.caption, cfg, gate, image)
    for _ in range(1, cfg.rounds + 1):
        if state.round > 0 and state.reverted_last_round > 0:
            state = inject_round(state, cfg, gate, image)
        if state.spans:
            detect_round(state, cfg, gate)
            state = filter_detected(state, state.rounds[-1].detected, cfg)
        else:
            state.rounds.append(RoundLog(round=state.round))
            state.reverted_last_round = 0
            state.round += 1

    gold = [
        HallucinationSpan(a, b, s.dimension)
        for (a, b), s in zip(state.span_layout(), state.spans)
    ]
    sample = BenchmarkSample(
        id=clean.id,
        image=clean.image,
        domain=clean.domain,
        caption=state.current_text(),
        gold_spans=gold,
        variant="synthetic",
        clean_caption=state.clean.source,
    )
    return InjectionOutcome(sample=sample, state=state, no_survivors=not gold)
