"""CLI tests driving main() in-process with scripted backends."""

from __future__ import annotations

import json

import pytest

from caploc.cli import main
from caploc.corpus import BenchmarkSample, HallucinationSpan, load_dataset, save_dataset

TAG = "<HALLUCINATION>"
END = "</HALLUCINATION>"


def write_dataset(tmp_path, samples, name="data.jsonl"):
    path = tmp_path / name
    save_dataset(samples, path)
    return path


def base_samples():
    return [
        BenchmarkSample(
            id="s1",
            image="",
            domain="nature",
            caption="a red car parked near the gate.",
            gold_spans=[HallucinationSpan(1, 2, "color")],
        ),
        BenchmarkSample(
            id="s2",
            image="",
            domain="gui",
            caption="the button is green.",
            gold_spans=[],
        ),
    ]


def write_script(tmp_path, rules, name="script.json"):
    path = tmp_path / name
    path.write_text(json.dumps(rules), encoding="utf-8")
    return path


class TestValidate:
    def test_good_dataset(self, tmp_path, capsys):
        dataset = write_dataset(tmp_path, base_samples())
        assert main(["validate", str(dataset)]) == 0
        out = capsys.readouterr().out
        assert "OK: 2 samples" in out

    def test_bad_dataset_exits_1(self, tmp_path, capsys):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"format": "dvb-jsonl", "version": 1, "tokenizer": "dvb-tok/1"}\n{"id": ""}\n')
        assert main(["validate", str(path)]) == 1
        assert "error" in capsys.readouterr().err

    def test_missing_file_exits_1(self, tmp_path):
        assert main(["validate", str(tmp_path / "nope.jsonl")]) == 1


class TestUsageErrors:
    def test_unknown_subcommand(self, capsys):
        assert main(["frobnicate"]) == 2
        assert "usage" in capsys.readouterr().err

    def test_unknown_flag(self, tmp_path, capsys):
        assert main(["validate", "--wat", "x"]) == 2

    def test_missing_required_flag(self, capsys):
        assert main(["score", "--dataset", "d.jsonl"]) == 2

    def test_evaluate_without_backend(self, tmp_path, capsys):
        dataset = write_dataset(tmp_path, base_samples())
        code = main(["evaluate", "--dataset", str(dataset), "--model", "m"])
        assert code == 2
        assert "no backend" in capsys.readouterr().err


class TestStats:
    def test_table(self, tmp_path, capsys):
        dataset = write_dataset(tmp_path, base_samples())
        assert main(["stats", str(dataset)]) == 0
        out = capsys.readouterr().out
        assert "nature" in out and "total" in out

    def test_json(self, tmp_path, capsys):
        dataset = write_dataset(tmp_path, base_samples())
        assert main(["stats", str(dataset), "--json"]) == 0
        data = json.loads(capsys.readouterr().out)
        assert data["per_domain"]["nature"]["samples"] == 1
        assert data["total"]["samples"] == 2


class TestAnnotate:
    def test_pairs_to_dataset(self, tmp_path, capsys):
        pairs = tmp_path / "pairs.jsonl"
        rows = [
            {
                "id": "p1",
                "domain": "nature",
                "caption": "a blue car parked here.",
                "corrected": "a red car parked here.",
                "labels": ["color"],
            },
            {
                "id": "p2",
                "domain": "gui",
                "caption": "the button is green.",
                "corrected": "the button is green.",
            },
        ]
        pairs.write_text("\n".join(json.dumps(r) for r in rows), encoding="utf-8")
        out = tmp_path / "annotated.jsonl"
        assert main(["annotate", "--pairs", str(pairs), "--out", str(out)]) == 0
        samples = load_dataset(out)
        assert samples[0].gold_spans == [HallucinationSpan(1, 2, "color")]
        assert samples[1].gold_spans == []

    def test_bad_label_count_exits_1(self, tmp_path, capsys):
        pairs = tmp_path / "pairs.jsonl"
        pairs.write_text(
            json.dumps(
                {
                    "id": "p1",
                    "caption": "a blue car.",
                    "corrected": "a red car.",
                    "labels": ["color", "shape"],
                }
            ),
            encoding="utf-8",
        )
        assert main(["annotate", "--pairs", str(pairs), "--out", str(tmp_path / "o.jsonl")]) == 1


def eval_script_rules():
    # gold echo for s1, plain echo for s2
    return [
        {
            "purpose": "evaluate",
            "contains": "a red car parked near the gate.",
            "responses": [f"a {TAG}red{END} car parked near the gate."] * 4,
        },
        {
            "purpose": "evaluate",
            "contains": "the button is green.",
            "responses": ["the button is green."] * 4,
        },
    ]


class TestEvaluateScoreRoundTrip:
    def test_reports_identical(self, tmp_path, capsys):
        dataset = write_dataset(tmp_path, base_samples())
        script = write_script(tmp_path, eval_script_rules())
        out_eval = tmp_path / "out_eval"
        code = main(
            [
                "evaluate",
                "--dataset", str(dataset),
                "--model", "locator",
                "--script", str(script),
                "--out", str(out_eval),
            ]
        )
        assert code == 0
        eval_report = json.loads((out_eval / "report.json").read_text())
        assert eval_report["overall"]["token"]["f1"] == 1.0
        assert eval_report["coverage"] == 1.0

        out_score = tmp_path / "out_score"
        code = main(
            [
                "score",
                "--dataset", str(dataset),
                "--transcripts", str(out_eval / "transcripts.jsonl"),
                "--model", "locator",
                "--out", str(out_score),
            ]
        )
        assert code == 0
        score_report = json.loads((out_score / "report.json").read_text())
        eval_report.pop("generated_at")
        score_report.pop("generated_at")
        assert score_report == eval_report

    def test_table_on_stdout(self, tmp_path, capsys):
        dataset = write_dataset(tmp_path, base_samples())
        script = write_script(tmp_path, eval_script_rules())
        main(
            [
                "evaluate",
                "--dataset", str(dataset),
                "--model", "locator",
                "--script", str(script),
                "--out", str(tmp_path / "out"),
            ]
        )
        out = capsys.readouterr().out
        assert "overall" in out
        assert "model: locator" in out


class TestConfigFile:
    def test_flags_override_config(self, tmp_path, capsys):
        dataset = write_dataset(tmp_path, base_samples())
        script = write_script(tmp_path, eval_script_rules())
        config = tmp_path / "config.json"
        config.write_text(
            json.dumps({"model": "from-config", "out": str(tmp_path / "cfg_out"), "script": str(script)})
        )
        code = main(
            [
                "evaluate",
                "--dataset", str(dataset),
                "--config", str(config),
                "--model", "from-flag",
            ]
        )
        assert code == 0
        report = json.loads((tmp_path / "cfg_out" / "report.json").read_text())
        assert report["model"] == "from-flag"

    def test_verbose_echoes_effective_values(self, tmp_path, capsys):
        dataset = write_dataset(tmp_path, base_samples())
        script = write_script(tmp_path, eval_script_rules())
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"model": "cfg-model", "script": str(script)}))
        main(
            [
                "evaluate",
                "--dataset", str(dataset),
                "--config", str(config),
                "--out", str(tmp_path / "out"),
                "--verbose",
            ]
        )
        err = capsys.readouterr().err
        assert "model = cfg-model" in err
        assert f"out = {tmp_path / 'out'}" in err


def inject_script(tmp_path):
    first = (
        f"a {TAG}blue{END} car parked near the {TAG}open{END} gate.\n"
        "LABELS: color, scene"
    )
    second = f"a red car parked near the {TAG}open{END} gate.\nLABELS: scene"
    rules = [
        {"purpose": "inject", "responses": [first, second] * 4},
        {
            "purpose": "detect",
            "contains": "blue",
            "responses": ['"blue" - unlikely color for this car'] * 4,
        },
        {"purpose": "detect", "responses": ["No issues found."] * 8},
    ]
    return write_script(tmp_path, rules, "inject_script.json")


class TestInject:
    def clean_dataset(self, tmp_path):
        return write_dataset(
            tmp_path,
            [
                BenchmarkSample(
                    id="c1",
                    image="",
                    domain="nature",
                    caption="a red car parked near the gate.",
                    gold_spans=[],
                )
            ],
            name="clean.jsonl",
        )

    def test_inject_writes_synthetic_dataset(self, tmp_path, capsys):
        dataset = self.clean_dataset(tmp_path)
        script = inject_script(tmp_path)
        out = tmp_path / "synthetic.jsonl"
        audit = tmp_path / "audit"
        code = main(
            [
                "inject",
                "--dataset", str(dataset),
                "--out", str(out),
                "--script", str(script),
                "--rounds", "1",
                "--no-include-image",
                "--audit", str(audit),
            ]
        )
        assert code == 0
        samples = load_dataset(out)
        assert samples[0].variant == "synthetic"
        assert samples[0].caption == "a red car parked near the open gate."
        assert samples[0].gold_spans == [HallucinationSpan(6, 7, "scene")]
        assert samples[0].clean_caption == "a red car parked near the gate."
        log = json.loads((audit / "c1.json").read_text())
        assert any(entry["phase"] == "detect" for entry in log)


class TestSweepAndReport:
    def test_sweep_table_and_file(self, tmp_path, capsys):
        clean = write_dataset(
            tmp_path,
            [
                BenchmarkSample(
                    id="c1",
                    image="",
                    domain="nature",
                    caption="a red car parked near the gate.",
                    gold_spans=[],
                )
            ],
            name="clean.jsonl",
        )
        rules = [
            {
                "purpose": "inject",
                "responses": [f"a {TAG}blue{END} car parked near the gate.\nLABELS: color"] * 8,
            },
            {"purpose": "detect", "responses": ["No issues found."] * 8},
            {
                "purpose": "evaluate",
                "responses": [f"a {TAG}blue{END} car parked near the gate."] * 8,
            },
        ]
        script = write_script(tmp_path, rules)
        out = tmp_path / "sweep_out"
        code = main(
            [
                "sweep",
                "--dataset", str(clean),
                "--models", "locator",
                "--rounds", "0,1",
                "--script", str(script),
                "--no-include-image",
                "--out", str(out),
            ]
        )
        assert code == 0
        rows = json.loads((out / "sweep.json").read_text())
        assert [(r["model"], r["rounds"]) for r in rows] == [("locator", 0), ("locator", 1)]
        assert all(r["f1"] == 1.0 for r in rows)
        table = capsys.readouterr().out
        assert "locator" in table

    def test_report_rerenders_json(self, tmp_path, capsys):
        dataset = write_dataset(tmp_path, base_samples())
        script = write_script(tmp_path, eval_script_rules())
        out = tmp_path / "out"
        main(
            [
                "evaluate",
                "--dataset", str(dataset),
                "--model", "locator",
                "--script", str(script),
                "--out", str(out),
            ]
        )
        evaluate_stdout = capsys.readouterr().out
        assert main(["report", str(out / "report.json")]) == 0
        report_stdout = capsys.readouterr().out
        assert report_stdout == evaluate_stdout


class TestCorrelate:
    def write_report(self, tmp_path, name, model, p, r, f1):
        path = tmp_path / name
        path.write_text(
            json.dumps({"model": model, "overall": {"token": {"p": p, "r": r, "f1": f1}}})
        )
        return path

    def test_correlate_outputs_rho(self, tmp_path, capsys):
        r1 = self.write_report(tmp_path, "r1.json", "a", 0.1, 0.2, 0.1)
        r2 = self.write_report(tmp_path, "r2.json", "b", 0.8, 0.9, 0.7)
        s1 = self.write_report(tmp_path, "s1.json", "a", 0.2, 0.9, 0.3)
        s2 = self.write_report(tmp_path, "s2.json", "b", 0.9, 0.1, 0.8)
        code = main(
            ["correlate", "--real", f"{r1},{r2}", "--synthetic", f"{s1},{s2}"]
        )
        assert code == 0
        rho = json.loads(capsys.readouterr().out)
        assert rho == {"p": 1.0, "r": -1.0, "f1": 1.0}

    def test_model_mismatch_exits_1(self, tmp_path, capsys):
        r1 = self.write_report(tmp_path, "r1.json", "a", 0.1, 0.2, 0.1)
        r2 = self.write_report(tmp_path, "r2.json", "b", 0.8, 0.9, 0.7)
        s1 = self.write_report(tmp_path, "s1.json", "a", 0.2, 0.9, 0.3)
        s2 = self.write_report(tmp_path, "s2.json", "c", 0.9, 0.1, 0.8)
        code = main(
            ["correlate", "--real", f"{r1},{r2}", "--synthetic", f"{s1},{s2}"]
        )
        assert code == 1
