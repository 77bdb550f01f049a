import csv
import json
import os

import numpy as np
import pytest

import mhekit as mk
from mhekit.cli import main


@pytest.fixture()
def config_file(tmp_path):
    path = tmp_path / "reactor.json"
    path.write_text(mk.ExperimentConfig(steps=15).to_json())
    return str(path)


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


class TestHappyPaths:
    def test_reproduce_figure(self, config_file, tmp_path, capsys):
        out = tmp_path / "fig"
        rc = main(
            ["reproduce-figure", "--config", config_file, "--seed", "42",
             "--out", str(out)]
        )
        assert rc == 0
        assert sorted(os.listdir(out)) == [
            "series_converged.csv", "series_i0.csv", "series_i2.csv",
            "series_i5.csv", "series_truth.csv", "summary.json",
        ]
        assert "rmse" in capsys.readouterr().out

    def test_simulate_writes_truth(self, config_file, tmp_path):
        out = tmp_path / "sim"
        assert main(["simulate", "--config", config_file, "--out", str(out)]) == 0
        rows = read_csv(out / "truth.csv")
        assert rows[0][:3] == ["t", "x1", "x2"]
        assert len(rows) == 17  # header + 16 state rows

    def test_estimate_budget_zero_equals_observe(self, config_file, tmp_path):
        est_dir = tmp_path / "est"
        obs_dir = tmp_path / "obs"
        assert main(
            ["estimate", "--config", config_file, "--budget", "0",
             "--out", str(est_dir)]
        ) == 0
        assert main(["observe", "--config", config_file, "--out", str(obs_dir)]) == 0
        est = np.array(
            [[float(c) for c in row[1:]] for row in read_csv(est_dir / "estimate_i0.csv")[1:]]
        )
        obs = np.array(
            [[float(c) for c in row[1:3]] for row in read_csv(obs_dir / "observer.csv")[1:]]
        )
        np.testing.assert_array_equal(est, obs)

    def test_estimate_trace_flag(self, config_file, tmp_path):
        out = tmp_path / "tr"
        assert main(
            ["estimate", "--config", config_file, "--budget", "0,2",
             "--trace", "--out", str(out)]
        ) == 0
        rows = read_csv(out / "cost_trace.csv")
        assert rows[0] == ["t", "series", "accepted_cost", "candidate_cost", "iterations"]
        # budgets 0 and 2 plus the converged baseline, T+1 rows each
        assert len(rows) == 1 + 3 * 16

    def test_analyze_writes_reports(self, config_file, tmp_path):
        out = tmp_path / "ana"
        assert main(["analyze", "--config", config_file, "--out", str(out)]) == 0
        doc = json.loads((out / "analysis.json").read_text())
        assert doc["fitted_observer_constants"]["fitted"] is True
        assert all(v >= 0 for v in doc["min_envelope_margin"].values())

    def test_default_config_used_when_omitted(self, tmp_path):
        out = tmp_path / "d"
        assert main(["simulate", "--seed", "1", "--out", str(out)]) == 0


class TestErrorPaths:
    def test_missing_config_exits_1_naming_path(self, tmp_path, capsys):
        missing = tmp_path / "absent.json"
        rc = main(["estimate", "--config", str(missing)])
        assert rc == 1
        assert "absent.json" in capsys.readouterr().err

    def test_malformed_config_exits_1(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(["estimate", "--config", str(bad)]) == 1

    def test_unknown_flag_exits_1(self, capsys):
        assert main(["estimate", "--bogus"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_model_exits_1(self, tmp_path, capsys):
        path = tmp_path / "cfg.json"
        doc = mk.ExperimentConfig().to_dict()
        doc["model"] = "pendulum"
        path.write_text(json.dumps(doc))
        assert main(["simulate", "--config", str(path)]) == 1

    def test_bad_budget_list_exits_1(self, config_file):
        assert main(["estimate", "--config", config_file, "--budget", "two"]) == 1
