"""Benchmark data model: sample records, JSONL serialization, validation, stats.

A dataset file is UTF-8 line-delimited JSON. The first line is a header
object recording the format name, format version and tokenizer version; each
following line is one sample. Gold spans are token-indexed against the
tokenizer in caploc.text, so they are only meaningful together with the
tokenizer version recorded in the header.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

from .text import TOKENIZER_VERSION, tokenize

logger = logging.getLogger(__name__)

FORMAT_NAME = "dvb-jsonl"
FORMAT_VERSION = 1

_SAMPLE_FIELDS = {"id", "image", "domain", "variant", "caption", "clean_caption", "gold_spans"}
_SPAN_FIELDS = {"start", "end", "dimension"}


class Domain(str, Enum):
    """The five image domains covered by a benchmark."""

    GUI = "gui"
    NATURE = "nature"
    CHART = "chart"
    MOVIE = "movie"
    POSTER = "poster"


class Dimension(str, Enum):
    """The ten hallucination categories, in canonical order."""

    NUMBER = "number"
    COLOR = "color"
    CATEGORY = "category"
    SHAPE = "shape"
    MATERIAL = "material"
    SPATIAL = "spatial"
    OCR = "ocr"
    SCENE = "scene"
    CAMERA = "camera"
    OTHER = "other"


DOMAIN_VALUES = tuple(d.value for d in Domain)
DIMENSION_VALUES = tuple(d.value for d in Dimension)


class DatasetError(ValueError):
    """Raised for unreadable, malformed, or invalid dataset files."""


@dataclass(frozen=True)
class HallucinationSpan:
    """A contiguous run of hallucinated tokens: [start, end) with a category.

    Stored as plain values so that malformed input can be represented and
    reported by validate_sample instead of failing at construction time.
    """

    start: int
    end: int
    dimension: str = Dimension.OTHER.value

    def to_dict(self) -> dict:
        return {"start": self.start, "end": self.end, "dimension": self.dimension}


@dataclass
class BenchmarkSample:
    """One benchmark record: image reference, caption, and gold annotations.

    variant is "real" for hallucinations produced naturally by a captioner and
    corrected by annotators, "synthetic" for injected ones. Synthetic samples
    carry the pre-injection caption in clean_caption as metadata.
    """

    id: str
    image: str
    domain: str
    caption: str
    gold_spans: list[HallucinationSpan] = field(default_factory=list)
    variant: str = "real"
    clean_caption: str | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gold_spans"] = [s.to_dict() for s in self.gold_spans]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False)

    @classmethod
    def from_dict(cls, data: dict) -> BenchmarkSample:
        unknown = set(data.keys()) - _SAMPLE_FIELDS
        if unknown:
            logger.warning("ignoring unknown sample fields: %s", sorted(unknown))
        spans = []
        for raw in data.get("gold_spans") or []:
            extra = set(raw.keys()) - _SPAN_FIELDS
            if extra:
                logger.warning("ignoring unknown span fields: %s", sorted(extra))
            spans.append(
                HallucinationSpan(
                    start=raw["start"],
                    end=raw["end"],
                    dimension=raw.get("dimension", Dimension.OTHER.value),
                )
            )
        return cls(
            id=data["id"],
            image=data.get("image", ""),
            domain=data["domain"],
            caption=data["caption"],
            gold_spans=spans,
            variant=data.get("variant", "real"),
            clean_caption=data.get("clean_caption"),
        )


@dataclass(frozen=True)
class ValidationIssue:
    sample_id: str
    field: str
    message: str

    def __str__(self) -> str:
        return f"sample {self.sample_id!r}: {self.field}: {self.message}"


@dataclass
class ValidationReport:
    issues: list[ValidationIssue] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.issues


def validate_sample(sample: BenchmarkSample) -> ValidationReport:
    """Check one sample against the data-model invariants.

    Returns a report listing every violation; an empty report means valid.
    """
    issues: list[ValidationIssue] = []

    def add(fld: str, msg: str) -> None:
        issues.append(ValidationIssue(sample.id, fld, msg))

    if not sample.id:
        add("id", "empty id")
    if sample.domain not in DOMAIN_VALUES:
        add("domain", f"unknown domain {sample.domain!r}; expected one of {list(DOMAIN_VALUES)}")
    if sample.variant not in ("real", "synthetic"):
        add("variant", f"unknown variant {sample.variant!r}")

    n = len(tokenize(sample.caption))
    prev_end = None
    prev_idx = None
    for i, span in enumerate(sample.gold_spans):
        if span.dimension not in DIMENSION_VALUES:
            add(f"gold_spans[{i}].dimension", f"unknown dimension {span.dimension!r}")
        if not (0 <= span.start < span.end <= n):
            add(
                f"gold_spans[{i}]",
                f"token range [{span.start}, {span.end}) invalid for caption of {n} tokens",
            )
            continue
        if prev_end is not None:
            if span.start < prev_end:
                add(
                    f"gold_spans[{i}]",
                    f"overlaps or precedes span {prev_idx} "
                    f"([{span.start}, {span.end}) vs end {prev_end})",
                )
        prev_end = span.end
        prev_idx = i
    return ValidationReport(issues)


def load_dataset(path: str | Path) -> list[BenchmarkSample]:
    """Load and validate a dataset file; returns samples in file order."""
    path = Path(path)
    samples: list[BenchmarkSample] = []
    seen_ids: set[str] = set()
    with open(path, encoding="utf-8") as f:
        header_line = f.readline()
        if not header_line.strip():
            raise DatasetError(f"{path}: empty file, expected a header line")
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}:1: unparseable header: {exc}") from exc
        if header.get("format") != FORMAT_NAME:
            raise DatasetError(f"{path}:1: unknown format {header.get('format')!r}")
        if header.get("version") != FORMAT_VERSION:
            raise DatasetError(f"{path}:1: unsupported format version {header.get('version')!r}")
        if header.get("tokenizer") != TOKENIZER_VERSION:
            raise DatasetError(
                f"{path}:1: tokenizer {header.get('tokenizer')!r} does not match "
                f"{TOKENIZER_VERSION!r}; gold spans are not portable across tokenizers"
            )
        for lineno, line in enumerate(f, 2):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: unparseable record: {exc}") from exc
            try:
                sample = BenchmarkSample.from_dict(record)
            except KeyError as exc:
                raise DatasetError(f"{path}:{lineno}: missing field {exc}") from exc
            if sample.id in seen_ids:
                raise DatasetError(f"{path}:{lineno}: duplicate sample id {sample.id!r}")
            seen_ids.add(sample.id)
            report = validate_sample(sample)
            if not report.ok:
                raise DatasetError(
                    f"{path}:{lineno}: invalid sample: " + "; ".join(str(i) for i in report.issues)
                )
            samples.append(sample)
    return samples


def save_dataset(samples: list[BenchmarkSample], path: str | Path) -> None:
    """Write samples to a dataset file with a fresh header line."""
    path = Path(path)
    header = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "tokenizer": TOKENIZER_VERSION}
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(header, ensure_ascii=False) + "\n")
        for sample in samples:
            f.write(sample.to_json() + "\n")


@dataclass
class DomainStats:
    samples: int = 0
    mean_caption_len: float | None = None
    hallu_locations: int = 0
    hallu_rate: float | None = None


@dataclass
class DatasetStats:
    per_domain: dict[str, DomainStats] = field(default_factory=dict)
    total: DomainStats = field(default_factory=DomainStats)

    def to_dict(self) -> dict:
        return {
            "per_domain": {k: asdict(v) for k, v in self.per_domain.items()},
            "total": asdict(self.total),
        }


def _stats_for(samples: list[BenchmarkSample]) -> DomainStats:
    if not samples:
        return DomainStats()
    lengths = [len(tokenize(s.caption)) for s in samples]
    locations = sum(len(s.gold_spans) for s in samples)
    with_hallu = sum(1 for s in samples if s.gold_spans)
    return DomainStats(
        samples=len(samples),
        mean_caption_len=round(sum(lengths) / len(samples), 1),
        hallu_locations=locations,
        hallu_rate=with_hallu / len(samples),
    )


def dataset_stats(samples: list[BenchmarkSample]) -> DatasetStats:
    """Per-domain and global counts: sizes, mean token length, hallucination rate.

    The hallucination rate is the fraction of samples with at least one gold
    span; with no samples, rates are reported as absent rather than 0/0.
    """
    by_domain: dict[str, list[BenchmarkSample]] = {}
    for s in samples:
        by_domain.setdefault(s.domain, []).append(s)
    return DatasetStats(
        per_domain={d: _stats_for(group) for d, group in sorted(by_domain.items())},
        total=_stats_for(list(samples)),
    )


@dataclass
class BatchDecision:
    accepted: bool
    correct: int
    total: int
    rate: float
    threshold: float
    defects: list[str] = field(default_factory=list)


def batch_acceptance(
    batch: list[tuple[str, str]], threshold: float = 0.97
) -> BatchDecision:
    """Accept a review batch iff the fraction of correct verdicts meets threshold.

    batch is a list of (sample id, verdict) with verdict "correct" or
    "incorrect"; the defect list enumerates the incorrect ids so a rejected
    batch can be returned for revision.
    """
    if not batch:
        raise ValueError("batch_acceptance: empty batch")
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"batch_acceptance: threshold {threshold} outside (0, 1]")
    defects = []
    correct = 0
    for sample_id, verdict in batch:
        if verdict == "correct":
            correct += 1
        elif verdict == "incorrect":
            defects.append(sample_id)
        else:
            raise ValueError(f"batch_acceptance: unknown verdict {verdict!r} for {sample_id!r}")
    rate = correct / len(batch)
    return BatchDecision(
        accepted=rate >= threshold,
        correct=correct,
        total=len(batch),
        rate=rate,
        threshold=threshold,
        defects=defects,
    )
