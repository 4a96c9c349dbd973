"""Command-line interface tests: flows and exit codes."""

import json

import pytest

import aerowrench.cli as cli


def run_main(args):
    return cli.main(args)


class TestRun:
    def test_run_writes_outputs(self, tmp_path):
        out = tmp_path / "out"
        code = run_main(["run", "--duration", "1.0", "--seed", "5",
                         "--out", str(out)])
        assert code == 0
        assert (out / "telemetry.csv").exists()
        doc = json.loads((out / "metrics.json").read_text())
        assert doc["seed"] == 5
        assert "qukf" in doc["rmse"] and "ekf" in doc["rmse"]

    def test_jsonl_format_flag(self, tmp_path):
        out = tmp_path / "o2"
        code = run_main(["run", "--duration", "0.5", "--out", str(out),
                         "--format", "jsonl"])
        assert code == 0
        assert (out / "telemetry.jsonl").exists()

    def test_estimator_subset_flag(self, tmp_path):
        out = tmp_path / "o3"
        code = run_main(["run", "--duration", "0.5", "--out", str(out),
                         "--estimators", "ekf"])
        assert code == 0
        doc = json.loads((out / "metrics.json").read_text())
        assert list(doc["rmse"].keys()) == ["ekf"]

    def test_same_seed_identical_metrics(self, tmp_path):
        texts = []
        for sub in ("r1", "r2"):
            out = tmp_path / sub
            assert run_main(["run", "--duration", "1.0", "--seed", "42",
                             "--out", str(out)]) == 0
            texts.append((out / "metrics.json").read_text())
        assert texts[0] == texts[1]


class TestCompare:
    def test_compare_prints_table(self, capsys):
        code = run_main(["compare", "--duration", "1.0", "--seed", "0"])
        assert code == 0
        out = capsys.readouterr().out
        assert "channel" in out and "qukf" in out and "ekf" in out
        assert "M_hz_Nm" in out


class TestBench:
    def test_bench_reports_latency_and_fit(self, capsys):
        code = run_main(["bench", "--iterations", "10000",
                         "--pads", "0,6,12,18", "--sweep-steps", "40"])
        assert code == 0
        out = capsys.readouterr().out
        assert "mean" in out and "p99" in out
        assert "R^2" in out


class TestExitCodes:
    def test_parse_error_is_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.yaml"
        bad.write_text("run:\n  seed: [unclosed\n")
        assert run_main(["run", "--config", str(bad),
                         "--out", str(tmp_path)]) == cli.EXIT_PARSE

    def test_unknown_key_is_2(self, tmp_path, capsys):
        bad = tmp_path / "bad2.yaml"
        bad.write_text("filter:\n  delt: 3\n")
        assert run_main(["run", "--config", str(bad),
                         "--out", str(tmp_path)]) == cli.EXIT_PARSE

    def test_validation_error_is_3(self, tmp_path, capsys):
        bad = tmp_path / "bad3.yaml"
        bad.write_text("system:\n  mass: -2.0\n")
        assert run_main(["run", "--config", str(bad),
                         "--out", str(tmp_path)]) == cli.EXIT_VALIDATION

    def test_divergence_is_4(self, tmp_path, capsys):
        cfg = tmp_path / "boom.yaml"
        cfg.write_text(
            "profile:\n  segments:\n"
            "    - {start: 0.0, end: 5.0, force: [1.0e9, 0.0, 0.0]}\n"
            "run:\n  duration: 3.0\n")
        assert run_main(["run", "--config", str(cfg),
                         "--out", str(tmp_path)]) == cli.EXIT_DIVERGENCE

    def test_io_error_is_5(self, tmp_path, capsys):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        # --out points at an existing regular file: directory creation fails
        assert run_main(["run", "--duration", "0.5",
                         "--out", str(blocker)]) == cli.EXIT_IO
