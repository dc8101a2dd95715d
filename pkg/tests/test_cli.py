import json
from pathlib import Path

import pytest

from returntime.cli import main

TINY_GEN = {
    "generator": {"user_count": 60},
    "training": {"rnn": {"epochs": 2}},
    "network": {"preliminary_epochs": 1, "hidden_size": 8, "fusion_size": 8},
}


def write_cfg(tmp_path, payload, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return str(path)


@pytest.fixture()
def generated(tmp_path):
    cfg = write_cfg(tmp_path, TINY_GEN)
    out = tmp_path / "data"
    assert main(["generate", "--config", cfg, "--out", str(out), "--seed", "3"]) == 0
    return cfg, out


class TestGenerate:
    def test_repeat_is_byte_identical(self, tmp_path):
        cfg = write_cfg(tmp_path, TINY_GEN)
        assert main(["generate", "--config", cfg, "--out", str(tmp_path / "a"), "--seed", "5"]) == 0
        assert main(["generate", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "5"]) == 0
        for name in ("sessions.jsonl", "ground_truth.csv", "manifest.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        # run_config embeds the output path; everything else must match
        rc_a = json.loads((tmp_path / "a" / "run_config.json").read_text())
        rc_b = json.loads((tmp_path / "b" / "run_config.json").read_text())
        rc_a["data"] = rc_b["data"] = None
        assert rc_a == rc_b

    def test_invalid_cohort_fractions_exit_2(self, tmp_path):
        cfg = write_cfg(tmp_path, {
            "generator": {
                "user_count": 10,
                "cohorts": [
                    {"name": "a", "fraction": 0.7, "gap_log_mean": 1.0, "gap_log_sigma": 0.5},
                    {"name": "b", "fraction": 0.7, "gap_log_mean": 1.0, "gap_log_sigma": 0.5},
                ],
            }
        })
        assert main(["generate", "--config", cfg, "--out", str(tmp_path / "x")]) == 2

    def test_unknown_generator_option_exit_2(self, tmp_path):
        cfg = write_cfg(tmp_path, {"generator": {"user_count": 10, "typo_field": 1}})
        assert main(["generate", "--config", cfg, "--out", str(tmp_path / "x")]) == 2

    def test_manifest_has_hash_and_versions(self, generated):
        _, out = generated
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "generate"
        assert len(manifest["config_hash"]) == 64
        assert set(manifest["versions"]) == {"returntime", "numpy", "python"}


class TestTrainPredictEvaluate:
    def test_unknown_model_exit_2(self, generated, tmp_path):
        cfg, out = generated
        rc = main(["train", "--model", "mystery", "--config", cfg,
                   "--config", str(out / "run_config.json"),
                   "--out", str(tmp_path / "m")])
        assert rc == 2

    def test_missing_config_file_exit_2(self, tmp_path):
        rc = main(["train", "--model", "baseline", "--config", str(tmp_path / "nope.json"),
                   "--out", str(tmp_path / "m")])
        assert rc == 2

    def test_missing_sessions_file_exit_3(self, tmp_path):
        cfg = write_cfg(tmp_path, {
            "data": {"sessions": str(tmp_path / "missing.jsonl")},
            "window": {"activity_start": 10.0, "prediction_start": 20.0, "horizon_end": 30.0},
        })
        assert main(["train", "--model", "baseline", "--config", cfg,
                     "--out", str(tmp_path / "m")]) == 3

    def test_predict_missing_checkpoint_exit_3(self, generated, tmp_path):
        cfg, out = generated
        rc = main(["predict", "--model", "cph", "--checkpoint", str(tmp_path / "nothing"),
                   "--config", cfg, "--config", str(out / "run_config.json"),
                   "--out", str(tmp_path / "p.csv")])
        assert rc == 3

    def test_predict_wrong_family_exit_3(self, generated, tmp_path):
        cfg, out = generated
        cfgs = ["--config", cfg, "--config", str(out / "run_config.json")]
        assert main(["train", "--model", "cph", *cfgs, "--out", str(tmp_path / "cox")]) == 0
        rc = main(["predict", "--model", "rnnsm", "--checkpoint", str(tmp_path / "cox"),
                   *cfgs, "--out", str(tmp_path / "p.csv")])
        assert rc == 3

    def test_end_to_end_single_model_report(self, generated, tmp_path):
        cfg, out = generated
        cfgs = ["--config", cfg, "--config", str(out / "run_config.json")]
        assert main(["train", "--model", "cph", *cfgs, "--out", str(tmp_path / "cox")]) == 0
        assert main(["predict", "--model", "cpha", "--checkpoint", str(tmp_path / "cox"),
                     *cfgs, "--out", str(tmp_path / "cpha.csv")]) == 0
        assert main(["evaluate", "--pred", str(tmp_path / "cpha.csv"),
                     "--out", str(tmp_path / "report")]) == 0
        report = json.loads((tmp_path / "report" / "report.json").read_text())
        assert list(report["models"]) == ["cpha"]
        for table in ("rmse_by_week", "mean_error_by_week", "rmse_by_active_days"):
            assert (tmp_path / "report" / f"{table}.csv").exists()

    def test_threads_flag_does_not_change_predictions(self, generated, tmp_path):
        cfg, out = generated
        cfgs = ["--config", cfg, "--config", str(out / "run_config.json")]
        assert main(["train", "--model", "cph", *cfgs, "--out", str(tmp_path / "cox")]) == 0
        assert main(["predict", "--model", "cph", "--checkpoint", str(tmp_path / "cox"),
                     *cfgs, "--out", str(tmp_path / "a.csv")]) == 0
        assert main(["predict", "--model", "cph", "--checkpoint", str(tmp_path / "cox"),
                     *cfgs, "--threads", "4", "--out", str(tmp_path / "b.csv")]) == 0
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_numerical_failure_exit_4(self, generated, tmp_path, monkeypatch):
        from returntime import cli
        from returntime.errors import NumericalError

        def boom(*args, **kwargs):
            raise NumericalError("synthetic numerical failure")

        monkeypatch.setattr(cli.experiment, "train_model", boom)
        cfg, out = generated
        rc = main(["train", "--model", "baseline", "--config", cfg,
                   "--config", str(out / "run_config.json"),
                   "--out", str(tmp_path / "m")])
        assert rc == 4

    def test_duplicate_prediction_files_rejected(self, generated, tmp_path):
        cfg, out = generated
        cfgs = ["--config", cfg, "--config", str(out / "run_config.json")]
        assert main(["train", "--model", "baseline", *cfgs, "--out", str(tmp_path / "bl")]) == 0
        assert main(["predict", "--model", "baseline", "--checkpoint", str(tmp_path / "bl"),
                     *cfgs, "--out", str(tmp_path / "p.csv")]) == 0
        rc = main(["evaluate", "--pred", str(tmp_path / "p.csv"), str(tmp_path / "p.csv"),
                   "--out", str(tmp_path / "r")])
        assert rc == 2
