import json

import pytest

from caploc.corpus import (
    BenchmarkSample,
    DatasetError,
    Dimension,
    Domain,
    HallucinationSpan,
    batch_acceptance,
    dataset_stats,
    load_dataset,
    save_dataset,
    validate_sample,
)


def make_sample(**kw):
    base = dict(
        id="s1",
        image="img/s1.png",
        domain="nature",
        caption="A red car parked near the gate.",
        gold_spans=[HallucinationSpan(1, 2, "color")],
    )
    base.update(kw)
    return BenchmarkSample(**base)


def test_enums():
    assert [d.value for d in Domain] == ["gui", "nature", "chart", "movie", "poster"]
    assert len(Dimension) == 10
    assert Dimension.OCR.value == "ocr"


def test_validate_ok():
    assert validate_sample(make_sample()).ok


def test_validate_unknown_domain():
    rep = validate_sample(make_sample(domain="indoor"))
    assert not rep.ok
    assert any(i.field == "domain" for i in rep.issues)


def test_validate_unknown_dimension():
    rep = validate_sample(make_sample(gold_spans=[HallucinationSpan(1, 2, "colour")]))
    assert any("colour" in i.message for i in rep.issues)


def test_validate_span_out_of_range():
    rep = validate_sample(make_sample(gold_spans=[HallucinationSpan(5, 99)]))
    assert not rep.ok


def test_validate_overlap_cites_both():
    rep = validate_sample(
        make_sample(gold_spans=[HallucinationSpan(1, 3), HallucinationSpan(2, 4)])
    )
    assert not rep.ok
    issue = rep.issues[0]
    assert "gold_spans[1]" in issue.field
    assert "span 0" in issue.message


def test_validate_unsorted_spans():
    rep = validate_sample(
        make_sample(gold_spans=[HallucinationSpan(4, 5), HallucinationSpan(0, 1)])
    )
    assert not rep.ok


def test_roundtrip(tmp_path):
    samples = [
        make_sample(),
        make_sample(id="s2", variant="synthetic", clean_caption="A car parked near the gate."),
    ]
    path = tmp_path / "data.jsonl"
    save_dataset(samples, path)
    loaded = load_dataset(path)
    assert loaded == samples
    # saving what was loaded reproduces the file byte for byte
    path2 = tmp_path / "again.jsonl"
    save_dataset(loaded, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_header_written(tmp_path):
    path = tmp_path / "d.jsonl"
    save_dataset([make_sample()], path)
    header = json.loads(path.read_text().splitlines()[0])
    assert header == {"format": "dvb-jsonl", "version": 1, "tokenizer": "dvb-tok/1"}


def test_load_rejects_bad_header(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text('{"format":"csv"}\n')
    with pytest.raises(DatasetError):
        load_dataset(path)


def test_load_rejects_tokenizer_mismatch(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text('{"format":"dvb-jsonl","version":1,"tokenizer":"dvb-tok/0"}\n')
    with pytest.raises(DatasetError, match="tokenizer"):
        load_dataset(path)


def test_load_names_sample_on_invalid_span(tmp_path):
    path = tmp_path / "d.jsonl"
    bad = make_sample(id="bad-one", gold_spans=[HallucinationSpan(0, 500)])
    save_dataset([bad], path)
    with pytest.raises(DatasetError, match="bad-one"):
        load_dataset(path)


def test_load_rejects_duplicate_id(tmp_path):
    path = tmp_path / "d.jsonl"
    save_dataset([make_sample(), make_sample()], path)
    with pytest.raises(DatasetError, match="duplicate"):
        load_dataset(path)


def test_load_reports_line_number(tmp_path):
    path = tmp_path / "d.jsonl"
    save_dataset([make_sample()], path)
    with open(path, "a", encoding="utf-8") as f:
        f.write("not json\n")
    with pytest.raises(DatasetError, match=":3:"):
        load_dataset(path)


def test_unknown_fields_ignored_with_warning(tmp_path, caplog):
    record = make_sample().to_dict()
    record["extra"] = 1
    path = tmp_path / "d.jsonl"
    with open(path, "w", encoding="utf-8") as f:
        f.write('{"format":"dvb-jsonl","version":1,"tokenizer":"dvb-tok/1"}\n')
        f.write(json.dumps(record) + "\n")
    with caplog.at_level("WARNING"):
        loaded = load_dataset(path)
    assert len(loaded) == 1
    assert "extra" in caplog.text


def test_stats_rate():
    s1 = make_sample()
    s2 = make_sample(id="s2", gold_spans=[])
    stats = dataset_stats([s1, s2])
    assert stats.total.samples == 2
    assert stats.total.hallu_rate == 0.5
    assert stats.total.hallu_locations == 1


def test_stats_mean_len_one_decimal():
    s1 = make_sample(caption="one two three", gold_spans=[])
    s2 = make_sample(id="s2", caption="one two", gold_spans=[])
    stats = dataset_stats([s1, s2])
    assert stats.total.mean_caption_len == 2.5


def test_stats_empty():
    stats = dataset_stats([])
    assert stats.total.samples == 0
    assert stats.total.hallu_rate is None
    assert stats.total.mean_caption_len is None
    assert stats.per_domain == {}


def test_stats_permutation_invariant():
    samples = [
        make_sample(id=f"s{i}", domain=d, gold_spans=[])
        for i, d in enumerate(["gui", "nature", "gui", "chart"])
    ]
    a = dataset_stats(samples)
    b = dataset_stats(list(reversed(samples)))
    assert a == b
    assert a.per_domain["gui"].samples == 2


def test_batch_accept_at_threshold():
    batch = [(f"s{i}", "correct") for i in range(97)]
    batch += [(f"b{i}", "incorrect") for i in range(3)]
    decision = batch_acceptance(batch, 0.97)
    assert decision.accepted
    assert decision.defects == ["b0", "b1", "b2"]


def test_batch_reject_below_threshold():
    batch = [(f"s{i}", "correct") for i in range(96)]
    batch += [(f"b{i}", "incorrect") for i in range(4)]
    decision = batch_acceptance(batch, 0.97)
    assert not decision.accepted
    assert len(decision.defects) == 4


def test_batch_all_correct():
    decision = batch_acceptance([("a", "correct")], 1.0)
    assert decision.accepted
    assert decision.defects == []


def test_batch_errors():
    with pytest.raises(ValueError):
        batch_acceptance([], 0.97)
    with pytest.raises(ValueError):
        batch_acceptance([("a", "maybe")], 0.97)
    with pytest.raises(ValueError):
        batch_acceptance([("a", "correct")], 0.0)
