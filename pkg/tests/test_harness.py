"""Evolution runs, pattern detection, determinism, and output emission."""

import json
import os

import numpy as np
import pytest

from wirelens.harness import (
    EpochRecord,
    ExperimentConfig,
    PatternReport,
    RunLog,
    SplitMetrics,
    desk_network,
    detect_patterns,
    intermediate_edge_ablation,
    run_evolution,
)
from wirelens.reporting import read_csv, run_log_tables, save_run_log


def tiny_cfg(**kw):
    base = dict(
        network=desk_network(channels=4, classes=5),
        dataset={"kind": "synthetic", "classes": 5, "size": [3, 8, 8],
                 "n": 96, "noise": 1.0, "seed": 0},
        epochs=3, batch_size=32, seed=0)
    base.update(kw)
    return ExperimentConfig(**base)


class TestConfig:
    def test_json_round_trip(self):
        cfg = tiny_cfg(mode="bilevel", framework="darts", split_ratio=0.25)
        again = ExperimentConfig.from_json(cfg.to_json())
        assert again == cfg

    def test_bilevel_needs_valid_split(self):
        with pytest.raises(ValueError, match="split"):
            tiny_cfg(mode="bilevel", split_ratio=1.5)

    def test_missing_dataset_path_rejected(self):
        with pytest.raises(FileNotFoundError):
            tiny_cfg(dataset={"kind": "cifar10", "path": "/does/not/exist.bin"})


class TestEvolution:
    def test_zero_epochs_is_empty_but_valid(self):
        log = run_evolution(tiny_cfg(epochs=0))
        assert log.epochs == 0
        assert not log.aborted
        metrics, alpha, costs = run_log_tables(log)
        assert metrics == [] and alpha == [] and costs == []

    @pytest.mark.parametrize("framework", ["dsnas", "snas", "darts", "proxyless"])
    def test_single_level_frameworks_run(self, framework):
        log = run_evolution(tiny_cfg(framework=framework, epochs=2))
        assert log.epochs == 2
        rec = log.records[-1]
        assert np.isfinite(rec.train.loss)
        assert rec.search is None
        # alpha moved somewhere
        moved = any(np.abs(rec.alpha[k]).max() > 0 for k in rec.alpha)
        assert moved

    def test_frozen_alpha_keeps_logits_fixed(self):
        log = run_evolution(tiny_cfg(mode="frozen_alpha", epochs=2))
        for rec in log.records:
            for k, v in rec.alpha.items():
                assert not v.any()

    def test_bilevel_logs_search_metrics_and_tags_updates(self):
        log = run_evolution(tiny_cfg(mode="bilevel", framework="darts",
                                     split_ratio=0.5, epochs=2))
        assert log.records[-1].search is not None
        # weight updates came exclusively from train batches
        assert set(log.theta_update_tags) == {"train"}

    def test_run_log_is_append_only_monotone(self):
        log = RunLog(config={})
        m = SplitMetrics(1.0, 1.0, 0.0, 0.1)
        log.append(EpochRecord(0, {}, {}, {}, m))
        with pytest.raises(ValueError, match="increasing"):
            log.append(EpochRecord(0, {}, {}, {}, m))


class TestDeterminism:
    def test_identical_config_gives_bit_identical_csv(self, tmp_path):
        cfg = tiny_cfg(epochs=3)
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        save_run_log(run_evolution(cfg), out_a)
        save_run_log(run_evolution(ExperimentConfig.from_json(cfg.to_json())), out_b)
        for name in ("metrics.csv", "alpha.csv", "edge_costs.csv"):
            assert (out_a / name).read_bytes() == (out_b / name).read_bytes()

    def test_different_seed_changes_log(self, tmp_path):
        a = run_evolution(tiny_cfg(epochs=2, seed=0))
        b = run_evolution(tiny_cfg(epochs=2, seed=1))
        assert a.records[-1].train.loss != b.records[-1].train.loss


class TestPatternDetector:
    @staticmethod
    def log_from_series(series, spec):
        """Build a RunLog whose argmax trajectory is prescribed per edge."""
        log = RunLog(config={})
        keys = list(spec.sampled_edges())
        epochs = len(next(iter(series.values())))
        for t in range(epochs):
            alpha = {}
            for key in keys:
                k = len(spec.candidate_names(*key))
                v = np.zeros(k)
                v[series[key][t]] = 1.0
                alpha[key] = v
            m = SplitMetrics(1.0, 1.0, 0.0, 0.1)
            log.append(EpochRecord(t, alpha, {k: v.copy() for k, v in alpha.items()},
                                   {}, m))
        return log

    def test_needs_three_epochs(self):
        spec = desk_network()
        series = {k: [0] for k in spec.sampled_edges()}
        with pytest.raises(ValueError, match="3 epochs"):
            detect_patterns(self.log_from_series(series, spec), spec)

    def test_constant_log_flags_nothing_but_p3(self):
        spec = desk_network()
        series = {k: [4] * 5 for k in spec.sampled_edges()}
        rep = detect_patterns(self.log_from_series(series, spec), spec)
        assert not rep.p1_growing and not rep.p2_width_pref and not rep.p3_catastrophic

    def test_drop_then_recover_flags_p1(self):
        spec = desk_network()
        # all edges drop to none at epoch 1; input edge (0,2) recovers at 3
        series = {k: [4, 0, 0, 0, 0] for k in spec.sampled_edges()}
        series[(0, (0, 2))] = [4, 0, 0, 4, 4]
        rep = detect_patterns(self.log_from_series(series, spec), spec)
        assert rep.p1_growing and rep.p1_onset == 3

    def test_width_preference_needs_strictly_longer_dwell(self):
        spec = desk_network()
        series = {k: [0, 4, 4, 4, 4] for k in spec.sampled_edges()}  # dwell 1
        series[(0, (2, 3))] = [0, 0, 0, 4, 4]  # intermediate dwell 3
        rep = detect_patterns(self.log_from_series(series, spec), spec)
        assert rep.p2_width_pref
        series[(0, (2, 3))] = [0, 4, 4, 4, 4]  # equal dwell: not strict
        rep = detect_patterns(self.log_from_series(series, spec), spec)
        assert not rep.p2_width_pref

    def test_p3_is_definitional_at_final_epoch(self):
        spec = desk_network()
        series = {k: [4, 4, 0] for k in spec.sampled_edges()}
        rep = detect_patterns(self.log_from_series(series, spec), spec)
        assert rep.p3_catastrophic

    def test_appending_recovery_epochs_can_only_add_patterns(self):
        spec = desk_network()
        series = {k: [4, 0, 0] for k in spec.sampled_edges()}
        early = detect_patterns(self.log_from_series(series, spec), spec)
        assert not early.p1_growing
        longer = {k: v + [0, 0] for k, v in series.items()}
        longer[(0, (0, 2))] = [4, 0, 0, 4, 4]
        late = detect_patterns(self.log_from_series(longer, spec), spec)
        assert late.p1_growing


class TestAblation:
    def test_simplified_cell_report_fields(self):
        cfg = ExperimentConfig(
            network=desk_network(cell="simplified", channels=4, classes=5),
            dataset={"kind": "synthetic", "classes": 5, "size": [3, 8, 8],
                     "n": 128, "noise": 1.0, "seed": 0},
            mode="frozen_alpha", epochs=4, batch_size=32, seed=0)
        rep = intermediate_edge_ablation("simplified", cfg)
        assert rep.variant == "simplified"
        assert set(rep.edge_means) == {"0:0-1", "0:0-2", "0:1-2"}

    def test_identical_seeds_identical_stats(self):
        cfg = ExperimentConfig(
            network=desk_network(cell="simplified", channels=4, classes=5),
            dataset={"kind": "synthetic", "classes": 5, "size": [3, 8, 8],
                     "n": 128, "noise": 1.0, "seed": 0},
            mode="frozen_alpha", epochs=3, batch_size=32, seed=3)
        a = intermediate_edge_ablation("simplified", cfg)
        b = intermediate_edge_ablation("simplified", cfg)
        assert a.edge_means == b.edge_means

    def test_unknown_variant_rejected(self):
        with pytest.raises(ValueError, match="variant"):
            intermediate_edge_ablation("original", tiny_cfg())
