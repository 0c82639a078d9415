import json
import subprocess
import sys

import pytest

from toolctx import cli
from toolctx.callparse import ToolCall
from toolctx.datasets import read_examples, write_examples
from toolctx.evalharness import ValidationExample
from toolctx.llmclient import BackendError


@pytest.fixture
def scenario(tmp_path):
    out = tmp_path / "sc"
    assert cli.main(["scenario", "--out", str(out)]) == 0
    return out


def common(sc):
    return ["--kb", str(sc / "kb"), "--scripted-fixtures", str(sc / "fixtures.json"), "--k", "3"]


def test_evaluate_trials_are_deterministic(scenario, tmp_path, capsys):
    code = cli.main(["evaluate", *common(scenario), "--dataset", str(scenario / "dataset.jsonl"), "--trials", "3",
                     "--out", str(tmp_path / "ev")])
    assert code == 0
    text = capsys.readouterr().out
    assert text.count("± 0.0") == 4
    report = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert all(v["stdev"] == 0.0 for v in report["summary"].values())
    assert report["provenance"]["inputs"]["dataset"]["sha256"]


def test_evaluate_perfect_scenario(tmp_path, capsys):
    sc = tmp_path / "clean"
    cli.main(["scenario", "--defects", "", "--out", str(sc)])
    capsys.readouterr()
    assert cli.main(["evaluate", *common(sc), "--dataset", str(sc / "dataset.jsonl"), "--out", str(tmp_path / "e")]) == 0
    out = capsys.readouterr().out
    assert out.count("100.0") == 4


def test_usage_errors_exit_one(tmp_path, capsys):
    assert cli.main(["evaluate", "--kb", str(tmp_path / "missing"), "--dataset", "x", "--scripted-fixtures", "y"]) == 1
    assert cli.main(["evaluate"]) == 1
    assert cli.main(["nonsense"]) == 1
    assert cli.main(["optimize", "--levels", "vibes"]) == 1
    assert "error" in capsys.readouterr().err


def test_optimize_planted_scenario(scenario, tmp_path):
    out = tmp_path / "opt"
    code = cli.main(["optimize", *common(scenario), "--train", str(scenario / "dataset.jsonl"),
                     "--test", str(scenario / "dataset.jsonl"), "--iterations", "3", "--out", str(out)])
    assert code == 0
    run = json.loads((out / "run.json").read_text())
    assert run["train_before"]["final_acc"] < 0.5 and run["train_after"]["final_acc"] == 1.0
    assert run["test_after"]["final_acc"] == 1.0
    assert (out / "ledger.provenance.json").exists() and (out / "final_kb" / "manifest.json").exists()

    assert cli.main(["report", "--ledger", str(out / "ledger.jsonl"), "--out", str(out)]) == 0
    rows = json.loads((out / "iteration_report.json").read_text())["rows"]
    assert rows[0]["accuracy"] < 0.5 and rows[-1]["accuracy"] == 1.0

    assert cli.main(["export-preferences", "--ledger", str(out / "ledger.jsonl"), "--out", str(out / "prefs")]) == 0
    manifest = json.loads((out / "prefs" / "manifest.json").read_text())
    assert manifest["counts"]["sft"] == 3


def test_levels_flag(scenario, tmp_path):
    out = tmp_path / "opt"
    cli.main(["optimize", *common(scenario), "--train", str(scenario / "dataset.jsonl"), "--levels", "tool", "--out", str(out)])
    levels = {json.loads(x)["level"] for x in (out / "ledger.jsonl").read_text().splitlines()}
    assert levels == {"tool"}


def test_resume_gives_identical_ledger(scenario, tmp_path, monkeypatch):
    args = [*common(scenario), "--train", str(scenario / "dataset.jsonl")]
    assert cli.main(["optimize", *args, "--out", str(tmp_path / "whole")]) == 0

    real = cli.scenario_backends

    class Dying:
        def __init__(self, inner, n):
            self.inner, self.n = inner, n

        def complete(self, request):
            if self.n == 0:
                raise BackendError("connection reset")
            self.n -= 1
            return self.inner.complete(request)

    def flaky(fixture):
        inference, editor = real(fixture)
        return inference, Dying(editor, 2)

    monkeypatch.setattr(cli, "scenario_backends", flaky)
    assert cli.main(["optimize", *args, "--out", str(tmp_path / "cut")]) == 2
    monkeypatch.setattr(cli, "scenario_backends", real)
    assert cli.main(["optimize", *args, "--resume", "--out", str(tmp_path / "cut")]) == 0
    assert (tmp_path / "cut" / "ledger.jsonl").read_text() == (tmp_path / "whole" / "ledger.jsonl").read_text()


def test_resume_without_checkpoint_is_usage_error(scenario, tmp_path):
    assert cli.main(["optimize", *common(scenario), "--train", str(scenario / "dataset.jsonl"), "--resume",
                     "--out", str(tmp_path / "none")]) == 1


def test_split_three_same_answer(tmp_path, capsys):
    call = ToolCall.make("t", {"a": 1})
    data = [ValidationExample(f"q{i}", {"t"}, (call,)) for i in range(3)]
    path = write_examples(data, tmp_path / "d.jsonl")
    results = []
    for run in ("a", "b"):
        assert cli.main(["split", "--dataset", str(path), "--seed", "7", "--out", str(tmp_path / run)]) == 0
        results.append(((tmp_path / run / "train.jsonl").read_text(), (tmp_path / run / "test.jsonl").read_text()))
    assert results[0] == results[1]
    assert len(read_examples(tmp_path / "a" / "train.jsonl")) == 2
    assert len(results[0][1].splitlines()) == 1


def test_export_empty_ledger(tmp_path, capsys):
    (tmp_path / "ledger.jsonl").write_text("")
    assert cli.main(["export-preferences", "--ledger", str(tmp_path / "ledger.jsonl"), "--out", str(tmp_path / "p")]) == 0
    assert "empty" in capsys.readouterr().err
    assert (tmp_path / "p" / "sft.jsonl").read_text() == ""


def test_import_xlam(tmp_path):
    rec = {"query": "weather in Oslo", "answers": [{"name": "w", "arguments": {"city": "Oslo"}}],
           "tools": [{"name": "w", "description": "Weather.", "parameters": {"city": {"type": "str", "description": "c"}}}]}
    (tmp_path / "x.json").write_text(json.dumps([rec]))
    assert cli.main(["import", "--format", "xlam", "--input", str(tmp_path / "x.json"), "--out", str(tmp_path / "imp")]) == 0
    assert len(read_examples(tmp_path / "imp" / "dataset.jsonl")) == 1


def test_env_fallback(scenario, tmp_path, monkeypatch):
    monkeypatch.setenv("TOOLCTX_DATASET", str(scenario / "dataset.jsonl"))
    assert cli.main(["evaluate", *common(scenario), "--out", str(tmp_path / "e")]) == 0


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "toolctx", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "toolctx" in proc.stdout
