"""Evaluation orchestration: prompt the model under test, collect transcripts,
score them, and emit reports; plus the round-sweep and real-vs-synthetic
correlation harnesses.

Scoring is one shared path whether outputs arrive live from a gate or from a
transcript file, so offline re-scoring reproduces a live run exactly.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace as dc_replace
from pathlib import Path

from . import __version__
from .corpus import BenchmarkSample, load_dataset, save_dataset
from .inject import (
    PROMPT_VERSION,
    InjectionConfig,
    fill_template,
    load_template,
    run_adversarial,
)
from .metrics import (
    RecallCounts,
    SampleScore,
    ScoreCard,
    TokenCounts,
    aggregate,
    dimension_counts,
    sentence_metrics,
    spearman,
    token_counts,
)
from .modelgate import BackendError, ImageAttachment, ModelGate, ModelRequest, Purpose
from .tagproto import align_to_reference, parse_tags
from .text import TOKENIZER_VERSION, split_sentences, tokenize

logger = logging.getLogger(__name__)

_MEDIA_TYPES = {
    ".png": "image/png",
    ".jpg": "image/jpeg",
    ".jpeg": "image/jpeg",
    ".webp": "image/webp",
    ".gif": "image/gif",
}


@dataclass(frozen=True)
class EvalConfig:
    dataset: str | Path
    model: str
    out_dir: str | Path = "eval_out"
    strict: bool = False
    width: int = 1
    image_root: str | Path | None = None
    require_image: bool = False

    def __post_init__(self) -> None:
        if self.width < 1:
            raise ValueError("EvalConfig: width must be >= 1")


@dataclass
class EvalReport:
    model: str
    dataset_sha256: str
    coverage: float
    card: ScoreCard
    samples: list[dict]
    skipped: list[str]
    tool_versions: dict
    generated_at: str

    def to_dict(self) -> dict:
        card = self.card.to_dict()
        return {
            "model": self.model,
            "dataset_sha256": self.dataset_sha256,
            "coverage": self.coverage,
            "overall": {"token": card["token"], "sentence": card["sentence"]},
            "dimensions": card["dimension_recall"],
            "domains": card.get("domains", {}),
            "faithfulness_violation_rate": card["faithfulness_violation_rate"],
            "macro": card["macro"],
            "sample_count": card["sample_count"],
            "samples": self.samples,
            "skipped": self.skipped,
            "tool_versions": self.tool_versions,
            "generated_at": self.generated_at,
        }


def load_image(path: str | Path) -> ImageAttachment | None:
    path = Path(path)
    if not path.is_file():
        return None
    media = _MEDIA_TYPES.get(path.suffix.lower(), "image/png")
    return ImageAttachment(data=path.read_bytes(), media_type=media)


def _resolve_image(sample: BenchmarkSample, cfg: EvalConfig) -> ImageAttachment | None:
    if not sample.image:
        return None
    path = Path(sample.image)
    if not path.is_absolute() and cfg.image_root is not None:
        path = Path(cfg.image_root) / path
    return load_image(path)


def build_prompt(sample: BenchmarkSample, cfg: EvalConfig) -> ModelRequest:
    """One fixed instruction (shipped asset) plus the caption and the image."""
    image = _resolve_image(sample, cfg)
    if image is None and cfg.require_image:
        raise FileNotFoundError(
            f"sample {sample.id!r}: image {sample.image!r} not found and images are required"
        )
    user = fill_template(load_template("evaluate"), caption=sample.caption)
    return ModelRequest(
        model=cfg.model,
        system="",
        user=user,
        purpose=Purpose.EVALUATE.value,
        image=image,
    )


def score_outputs(
    samples: list[BenchmarkSample], outputs: dict[str, str], cfg: EvalConfig
) -> tuple[ScoreCard, list[dict], list[str]]:
    """Score raw model outputs against gold; the single scoring path shared by
    live evaluation and offline transcript scoring.

    Returns the aggregate card, per-sample rows, and skipped sample ids.
    Samples without an output are skipped and excluded from denominators. In
    strict mode an unfaithful output scores as an empty prediction.
    """
    scores: list[SampleScore] = []
    rows: list[dict] = []
    skipped: list[str] = []
    for sample in samples:
        output = outputs.get(sample.id)
        if output is None:
            skipped.append(sample.id)
            continue
        tc = tokenize(sample.caption)
        si = split_sentences(tc)
        parsed = parse_tags(output)
        pred = align_to_reference(parsed.stripped, parsed.marked_ranges, tc)
        indices = set(pred.indices)
        if cfg.strict and not pred.faithful:
            indices = set()
        gold = set()
        for span in sample.gold_spans:
            gold.update(range(span.start, span.end))
        tok = token_counts(gold, indices)
        sen = sentence_metrics(gold, indices, si).counts
        dims = dimension_counts(sample.gold_spans, indices)
        score = SampleScore(
            sample_id=sample.id,
            domain=sample.domain,
            token=tok,
            sentence=sen,
            dimensions=dims,
            faithful=pred.faithful,
        )
        scores.append(score)
        rows.append(
            {
                "id": sample.id,
                "domain": sample.domain,
                "token": {
                    "intersection": tok.intersection,
                    "predicted": tok.predicted,
                    "gold": tok.gold,
                },
                "sentence": {
                    "intersection": sen.intersection,
                    "predicted": sen.predicted,
                    "gold": sen.gold,
                },
                "dimensions": {
                    d: {"hit": rc.hit, "total": rc.total} for d, rc in sorted(dims.items())
                },
                "faithful": pred.faithful,
                "alignment_coverage": pred.alignment_coverage,
                "parse_status": parsed.status.value,
            }
        )
    if not scores:
        raise ValueError("score_outputs: no samples could be scored")
    return aggregate(scores), rows, skipped


def rows_to_scores(rows: list[dict]) -> list[SampleScore]:
    """Rebuild SampleScore objects from persisted report rows."""
    out = []
    for row in rows:
        out.append(
            SampleScore(
                sample_id=row["id"],
                domain=row["domain"],
                token=TokenCounts(**row["token"]),
                sentence=TokenCounts(**row["sentence"]),
                dimensions={
                    d: RecallCounts(v["hit"], v["total"])
                    for d, v in row["dimensions"].items()
                },
                faithful=row["faithful"],
            )
        )
    return out


def write_transcripts(path: str | Path, rows: list[tuple[str, str]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for sample_id, output in rows:
            f.write(json.dumps({"id": sample_id, "output": output}, ensure_ascii=False) + "\n")


def read_transcripts(path: str | Path) -> dict[str, str]:
    outputs: dict[str, str] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                sample_id, output = record["id"], record["output"]
            except (json.JSONDecodeError, KeyError) as exc:
                raise ValueError(f"{path}:{lineno}: bad transcript line: {exc}") from exc
            if sample_id in outputs:
                raise ValueError(f"{path}:{lineno}: duplicate transcript id {sample_id!r}")
            outputs[sample_id] = output
    return outputs


def _dataset_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _tool_versions() -> dict:
    return {"caploc": __version__, "tokenizer": TOKENIZER_VERSION, "prompts": PROMPT_VERSION}


def _make_report(
    cfg: EvalConfig,
    samples: list[BenchmarkSample],
    outputs: dict[str, str],
) -> EvalReport:
    card, rows, skipped = score_outputs(samples, outputs, cfg)
    coverage = (len(samples) - len(skipped)) / len(samples) if samples else 0.0
    return EvalReport(
        model=cfg.model,
        dataset_sha256=_dataset_sha256(cfg.dataset),
        coverage=coverage,
        card=card,
        samples=rows,
        skipped=skipped,
        tool_versions=_tool_versions(),
        generated_at=time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    )


def evaluate_dataset(cfg: EvalConfig, gate: ModelGate) -> EvalReport:
    """Prompt the model for every sample, persist transcripts, score.

    Failed requests become skipped rows rather than aborting the run; with a
    warm cache no request leaves the process and the report is reproducible.
    """
    samples = load_dataset(cfg.dataset)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def fetch(sample: BenchmarkSample) -> tuple[str, str | None]:
        try:
            response = gate.complete(build_prompt(sample, cfg))
            return sample.id, response.text
        except (BackendError, FileNotFoundError) as exc:
            logger.warning("sample %s failed: %s", sample.id, exc)
            return sample.id, None

    if cfg.width > 1:
        with ThreadPoolExecutor(max_workers=cfg.width) as pool:
            fetched = list(pool.map(fetch, samples))
    else:
        fetched = [fetch(s) for s in samples]

    outputs = {sid: text for sid, text in fetched if text is not None}
    write_transcripts(out_dir / "transcripts.jsonl", [(s, t) for s, t in fetched if t is not None])
    return _make_report(cfg, samples, outputs)


def score_transcripts(cfg: EvalConfig, transcripts: str | Path) -> EvalReport:
    """Offline twin of evaluate_dataset: same scoring path, no model calls."""
    samples = load_dataset(cfg.dataset)
    outputs = read_transcripts(transcripts)
    return _make_report(cfg, samples, outputs)


def correlate_settings(
    real_reports: list[dict], synthetic_reports: list[dict]
) -> dict[str, float | None]:
    """Spearman rank agreement between real and synthetic token scores,
    models matched by id. Constant score vectors yield an absent value."""
    real_by_model = {r["model"]: r for r in real_reports}
    syn_by_model = {r["model"]: r for r in synthetic_reports}
    if set(real_by_model) != set(syn_by_model):
        raise ValueError(
            f"correlate_settings: model sets differ: {sorted(real_by_model)} vs {sorted(syn_by_model)}"
        )
    if len(real_by_model) < 2:
        raise ValueError("correlate_settings: need at least 2 models")
    models = sorted(real_by_model)
    out: dict[str, float | None] = {}
    for metric in ("p", "r", "f1"):
        real_scores = [real_by_model[m]["overall"]["token"][metric] for m in models]
        syn_scores = [syn_by_model[m]["overall"]["token"][metric] for m in models]
        out[metric] = spearman(real_scores, syn_scores)
    return out


@dataclass(frozen=True)
class SweepRow:
    model: str
    rounds: int
    p: float
    r: float
    f1: float


def sweep_rounds(
    clean_dataset: str | Path,
    ks: list[int],
    detector_models: list[str],
    inj_cfg: InjectionConfig,
    eval_cfg: EvalConfig,
    gate: ModelGate,
) -> list[SweepRow]:
    """Build one synthetic dataset per K, then evaluate each listed model as a
    locator on it through the ordinary evaluation path."""
    clean = load_dataset(clean_dataset)
    out_dir = Path(eval_cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows: list[SweepRow] = []
    for k in ks:
        cfg_k = dc_replace(inj_cfg, rounds=k)
        synthetic = [run_adversarial(s, cfg_k, gate).sample for s in clean]
        dataset_path = out_dir / f"sweep_k{k}.jsonl"
        save_dataset(synthetic, dataset_path)
        for model in detector_models:
            model_cfg = dc_replace(
                eval_cfg,
                dataset=dataset_path,
                model=model,
                out_dir=out_dir / f"sweep_k{k}_{model}",
            )
            report = evaluate_dataset(model_cfg, gate)
            rows.append(
                SweepRow(
                    model=model,
                    rounds=k,
                    p=report.card.token.p,
                    r=report.card.token.r,
                    f1=report.card.token.f1,
                )
            )
    return rows


def render_sweep_table(rows: list[SweepRow]) -> str:
    lines = [f"{'model':<24} {'K':>3} {'P_tok':>8} {'R_tok':>8} {'F1_tok':>8}"]
    for row in rows:
        lines.append(
            f"{row.model:<24} {row.rounds:>3} {row.p:>8.4f} {row.r:>8.4f} {row.f1:>8.4f}"
        )
    return "\n".join(lines) + "\n"


def _format_card_line(name: str, card: ScoreCard, dims: list[str]) -> str:
    cells = [
        f"{name:<12}",
        f"{card.token.p:>7.4f}",
        f"{card.token.r:>7.4f}",
        f"{card.token.f1:>7.4f}",
        f"{card.sentence.p:>7.4f}",
        f"{card.sentence.r:>7.4f}",
        f"{card.sentence.f1:>7.4f}",
    ]
    for d in dims:
        value = card.dimension_recall.get(d)
        cells.append(f"{value:>7.4f}" if value is not None else f"{'-':>7}")
    return " ".join(cells)


def render_report_table(report: EvalReport) -> str:
    """Fixed-width summary: overall and per-domain rows, token and sentence
    P/R/F1, then per-dimension token recall columns."""
    dims = sorted(report.card.dimension_recall)
    header_cells = [f"{'section':<12}"] + [
        f"{h:>7}" for h in ("P_tok", "R_tok", "F1_tok", "P_sen", "R_sen", "F1_sen")
    ]
    header_cells += [f"{d[:7]:>7}" for d in dims]
    lines = [
        f"model: {report.model}",
        f"dataset: sha256 {report.dataset_sha256[:12]}...  coverage: {report.coverage:.3f}  "
        f"faithfulness violations: {report.card.faithfulness_violation_rate:.3f}",
        "",
        " ".join(header_cells),
    ]
    lines.append(_format_card_line("overall", report.card, dims))
    for domain, sub in sorted(report.card.per_domain.items()):
        lines.append(_format_card_line(domain, sub, dims))
    if not dims:
        lines.append("")
        lines.append("note: no gold dimension support in this dataset; recall columns omitted")
    return "\n".join(lines) + "\n"


def emit_report(
    report: EvalReport, out_dir: str | Path, formats: set[str] = frozenset({"json", "table"})
) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    if "json" in formats:
        path = out_dir / "report.json"
        with open(path, "w", encoding="utf-8") as f:
            json.dump(report.to_dict(), f, ensure_ascii=False, indent=2, sort_keys=True)
            f.write("\n")
        written.append(path)
    if "table" in formats:
        path = out_dir / "report.txt"
        path.write_text(render_report_table(report), encoding="utf-8")
        written.append(path)
    return written
