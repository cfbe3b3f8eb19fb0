"""End-to-end CLI checks: every subcommand, output files, overrides."""

import json

import numpy as np
import pytest

from replayfl.cli import main
from replayfl.data import load_fedr
from replayfl.metrics import read_metrics_csv

TINY = {
    "scenario": "tiny",
    "rounds": 3,
    "n_clients": 3,
    "batch_size": 32,
    "d_in": 24,
    "d_model": 16,
    "d_ff": 32,
    "n_layers": 2,
    "warm_epochs": 2,
    "seed": 7,
    "dataset": {"n_classes": 6, "per_class": 30},
}


def write_scenario(tmp_path, payload, name="scenario.json"):
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return str(path)


class TestSimulateCommand:
    def test_writes_run_artifacts(self, tmp_path):
        config = write_scenario(tmp_path, TINY)
        out = tmp_path / "run"
        assert main(["simulate", "--config", config, "--out", str(out)]) == 0
        for name in ("metrics.csv", "summary.json", "final_params.npz",
                     "config.json", "scenario.json"):
            assert (out / name).exists()
        rows = read_metrics_csv(out / "metrics.csv")
        assert len(rows) == TINY["rounds"] + 1
        summary = json.loads((out / "summary.json").read_text())
        assert summary["config"]["scenario"] == "tiny"
        assert summary["total_bytes"] == sum(
            row["bytes_up"] + row["bytes_down"] for row in rows)

    def test_repeat_runs_byte_identical(self, tmp_path):
        config = write_scenario(tmp_path, TINY)
        main(["simulate", "--config", config, "--out", str(tmp_path / "a")])
        main(["simulate", "--config", config, "--out", str(tmp_path / "b")])
        assert ((tmp_path / "a" / "metrics.csv").read_bytes()
                == (tmp_path / "b" / "metrics.csv").read_bytes())
        assert ((tmp_path / "a" / "summary.json").read_bytes()
                == (tmp_path / "b" / "summary.json").read_bytes())

    def test_seed_override_changes_run(self, tmp_path):
        config = write_scenario(tmp_path, TINY)
        main(["simulate", "--config", config, "--out", str(tmp_path / "a")])
        main(["simulate", "--config", config, "--seed", "9",
              "--out", str(tmp_path / "b")])
        a = json.loads((tmp_path / "a" / "summary.json").read_text())
        b = json.loads((tmp_path / "b" / "summary.json").read_text())
        assert b["config"]["seed"] == 9
        assert a["config"]["seed_data"] != b["config"]["seed_data"]

    def test_unknown_config_key_fails_cleanly(self, tmp_path, capsys):
        config = write_scenario(tmp_path, {**TINY, "typo_key": 1})
        assert main(["simulate", "--config", config,
                     "--out", str(tmp_path / "x")]) == 2
        assert "typo_key" in capsys.readouterr().err

    def test_missing_config_file_fails_cleanly(self, tmp_path, capsys):
        assert main(["simulate", "--config", str(tmp_path / "nope.json"),
                     "--out", str(tmp_path / "x")]) == 2
        assert "not found" in capsys.readouterr().err


class TestLateJoinCommand:
    def test_runs_and_reports_join(self, tmp_path):
        payload = {**TINY, "scenario": "tiny-lj", "rounds": 8,
                   "warm_epochs": 20, "gate_rounds": 3,
                   "dataset": {"n_classes": 8, "per_class": 40},
                   "late_join": {"join_round": 4, "n_new_classes": 2}}
        config = write_scenario(tmp_path, payload)
        out = tmp_path / "run"
        assert main(["late-join", "--config", config, "--out", str(out)]) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["join"]["join_round"] == 4
        assert summary["join"]["new_class_ids"] == [6, 7]

    def test_requires_late_join_block(self, tmp_path, capsys):
        config = write_scenario(tmp_path, TINY)
        assert main(["late-join", "--config", config,
                     "--out", str(tmp_path / "x")]) == 2
        assert "late_join" in capsys.readouterr().err


class TestPulseProbeCommand:
    def test_runs_and_records_pulses(self, tmp_path):
        payload = {**TINY, "scenario": "tiny-pp", "rounds": 6,
                   "warm_epochs": 0, "replay_ratio": 0.0,
                   "pulse": {"finetune_every": 3}}
        config = write_scenario(tmp_path, payload)
        out = tmp_path / "run"
        assert main(["pulse-probe", "--config", config,
                     "--out", str(out)]) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert [p["round"] for p in summary["pulses"]] == [3, 6]

    def test_rejects_nonzero_replay_ratio(self, tmp_path, capsys):
        payload = {**TINY, "pulse": {"finetune_every": 3}}
        config = write_scenario(tmp_path, payload)
        assert main(["pulse-probe", "--config", config,
                     "--out", str(tmp_path / "x")]) == 2
        assert "replay_ratio" in capsys.readouterr().err


class TestGenDataAndEval:
    def test_gen_data_writes_loadable_splits(self, tmp_path):
        config = write_scenario(tmp_path, TINY)
        out = tmp_path / "data"
        assert main(["gen-data", "--config", config, "--out", str(out)]) == 0
        full = load_fedr(out / "full.fedr")
        train = load_fedr(out / "train.fedr")
        val = load_fedr(out / "val.fedr")
        assert len(full) == 6 * 30
        assert len(train) + len(val) == len(full)
        assert val.class_names == full.class_names

    def test_eval_scores_snapshot_on_fedr(self, tmp_path, capsys):
        config = write_scenario(tmp_path, TINY)
        run_dir = tmp_path / "run"
        data_dir = tmp_path / "data"
        main(["simulate", "--config", config, "--out", str(run_dir)])
        main(["gen-data", "--config", config, "--out", str(data_dir)])
        capsys.readouterr()
        out = tmp_path / "ev"
        assert main(["eval",
                     "--params", str(run_dir / "final_params.npz"),
                     "--data", str(data_dir / "val.fedr"),
                     "--out", str(out)]) == 0
        payload = json.loads((out / "eval.json").read_text())
        assert 0.0 <= payload["accuracy"] <= 1.0
        assert len(payload["per_class"]) == 6
        # the CLI accuracy must match the summary's final accuracy, since
        # gen-data rebuilds the same validation split from the same seeds
        summary = json.loads((run_dir / "summary.json").read_text())
        assert payload["accuracy"] == pytest.approx(
            summary["final_accuracy"], abs=1e-12)

    def test_eval_config_path_matches_data_path(self, tmp_path, capsys):
        config = write_scenario(tmp_path, TINY)
        run_dir = tmp_path / "run"
        data_dir = tmp_path / "data"
        main(["simulate", "--config", config, "--out", str(run_dir)])
        main(["gen-data", "--config", config, "--out", str(data_dir)])
        capsys.readouterr()
        via_data = tmp_path / "ev_data"
        via_cfg = tmp_path / "ev_cfg"
        snapshot = str(run_dir / "final_params.npz")
        assert main(["eval", "--params", snapshot,
                     "--data", str(data_dir / "val.fedr"),
                     "--out", str(via_data)]) == 0
        assert main(["eval", "--params", snapshot,
                     "--config", config,
                     "--out", str(via_cfg)]) == 0
        a = json.loads((via_data / "eval.json").read_text())
        b = json.loads((via_cfg / "eval.json").read_text())
        assert a == b

    def test_eval_requires_exactly_one_source(self, tmp_path, capsys):
        config = write_scenario(tmp_path, TINY)
        run_dir = tmp_path / "run"
        data_dir = tmp_path / "data"
        main(["simulate", "--config", config, "--out", str(run_dir)])
        main(["gen-data", "--config", config, "--out", str(data_dir)])
        capsys.readouterr()
        snapshot = str(run_dir / "final_params.npz")
        assert main(["eval", "--params", snapshot]) == 2
        assert "exactly one data source" in capsys.readouterr().err
        assert main(["eval", "--params", snapshot,
                     "--data", str(data_dir / "val.fedr"),
                     "--config", config]) == 2
        assert "exactly one data source" in capsys.readouterr().err
