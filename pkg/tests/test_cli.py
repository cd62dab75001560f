"""Command-line interface: subcommands, outputs, exit codes."""

import json
import os

import numpy as np
import pytest

from wirelens.cli import main
from wirelens.harness import ExperimentConfig, desk_network


@pytest.fixture
def config_path(tmp_path):
    cfg = ExperimentConfig(
        network=desk_network(channels=4, classes=5),
        dataset={"kind": "synthetic", "classes": 5, "size": [3, 8, 8],
                 "n": 96, "noise": 1.0, "seed": 0},
        epochs=3, batch_size=32, seed=0)
    p = tmp_path / "config.json"
    p.write_text(json.dumps(cfg.to_json()))
    return str(p)


class TestGradcheckCommand:
    def test_selected_ops_pass(self, capsys):
        rc = main(["gradcheck", "--ops", "relu,linear"])
        out = capsys.readouterr().out
        assert rc == 0
        assert out.count("[PASS]") == 2


class TestVerifyCommand:
    def test_suite_runs_and_reports(self, tmp_path, capsys):
        report = tmp_path / "report.json"
        rc = main(["verify", "--suite", "cor12", "--json", str(report)])
        out = capsys.readouterr().out
        assert rc == 0
        assert "[PASS]" in out
        rows = json.loads(report.read_text())
        assert all({"name", "residual", "tolerance", "passed", "seed"} <= set(r)
                   for r in rows)


class TestEvolveCommand:
    def test_writes_outputs_and_patterns(self, config_path, tmp_path, capsys):
        out = tmp_path / "run"
        rc = main(["evolve", "--config", config_path, "--out", str(out),
                   "--framework", "dsnas", "--mode", "single"])
        assert rc == 0
        for name in ("metrics.csv", "alpha.csv", "edge_costs.csv",
                     "metrics.json", "patterns.json", "alpha_probabilities.svg"):
            assert (out / name).exists(), name

    def test_exit_zero_and_determinism(self, config_path, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["evolve", "--config", config_path, "--out", str(a)]) == 0
        assert main(["evolve", "--config", config_path, "--out", str(b)]) == 0
        assert (a / "alpha.csv").read_bytes() == (b / "alpha.csv").read_bytes()


class TestMcCostCommand:
    def test_emits_csv_json_svg(self, config_path, tmp_path, capsys):
        out = tmp_path / "mc"
        rc = main(["mc-cost", "--config", config_path, "--out", str(out)])
        assert rc == 0
        assert (out / "cost_stats.csv").exists()
        assert (out / "cost_stats.json").exists()
        assert (out / "cost_stats_heatmap.svg").exists()


class TestDecomposeCommand:
    def test_prints_identity_residual(self, config_path, tmp_path, capsys):
        out = tmp_path / "d"
        rc = main(["decompose", "--config", config_path, "--out", str(out)])
        text = capsys.readouterr().out
        assert rc == 0
        assert "entropy" in text
        payload = json.loads((out / "decomposition.json").read_text())
        assert payload["residual"] < 1e-6
