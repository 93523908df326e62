import json
import subprocess
import sys

import pytest
import yaml

import sfu.pipeline as pipeline
from sfu.cli import main
from sfu.config import DEFAULTS, ExperimentConfig, load_config
from sfu.errors import ConfigError
from sfu.metrics import read_metrics_csv


def write(tmp_path, tree, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(tree))
    return path


class TestLoadConfig:
    def test_minimal(self, tmp_path):
        cfg = load_config(write(tmp_path, {"experiment": "train"}))
        assert cfg["fl"] == DEFAULTS["fl"] and cfg.experiment == "train"
        assert cfg.fl_config().participation_fraction == 0.25

    def test_empty_file(self, tmp_path):
        (tmp_path / "e.yaml").write_text("")
        assert load_config(tmp_path / "e.yaml").to_dict() == ExperimentConfig.from_dict({}).to_dict()

    def test_zero_participation(self, tmp_path):
        with pytest.raises(ConfigError, match=r"fl\.participation_fraction"):
            load_config(write(tmp_path, {"fl": {"participation_fraction": 0}}))

    @pytest.mark.parametrize("tree,key", [
        ({"fl": {"lr_typo": 0.1}}, "fl.lr_typo"),
        ({"nonsense": 1}, "nonsense"),
        ({"data": {"beta": "high"}}, "data.beta"),
        ({"fl": {"num_clients": 2.5}}, "fl.num_clients"),
        ({"unlearn": {"teachers": ["preserve", "label"]}}, "unlearn.teachers"),
        ({"unlearn": {"target_classes": []}}, "unlearn.target_classes"),
        ({"unlearn": {"alphas": [1.0]}}, "unlearn.alphas"),
        ({"backdoor": {"attack_target": 12}}, "backdoor.attack_target"),
        ({"experiment": "finetune"}, "experiment"),
        ({"fl": 3}, "fl"),
    ])
    def test_diagnostics_name_the_key(self, tmp_path, tree, key):
        with pytest.raises(ConfigError) as err:
            load_config(write(tmp_path, tree))
        assert str(err.value).startswith(key + ":")

    def test_bad_yaml(self, tmp_path):
        (tmp_path / "b.yaml").write_text("fl: [unclosed")
        with pytest.raises(ConfigError):
            load_config(tmp_path / "b.yaml")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.yaml")

    def test_round_trip(self, tmp_path):
        cfg = load_config(write(tmp_path, {"fl": {"lr": 0.03}, "unlearn": {"alpha_override": 4},
                                           "backdoor": {"enabled": True, "trigger_value": 1}}))
        again = load_config(write(tmp_path, yaml.safe_load(cfg.dump()), "again.yaml"))
        assert again == cfg and again["unlearn"]["alpha_override"] == 4.0

    def test_named_seeds(self):
        cfg = ExperimentConfig.from_dict({}).with_seed(7)
        assert cfg["seeds"] == {"data": 7, "partition": 7, "init": 7, "sampling": 7, "forget_teacher": 1234}
        assert cfg.fl_config().seed == 7 and cfg.unlearn_config().forget_teacher_seed == 1234

    def test_backdoor_default_trigger(self):
        spec = ExperimentConfig.from_dict({"backdoor": {"enabled": True}}).backdoor_spec()
        assert spec.trigger_value == pytest.approx(0.75) and spec.trigger_mask == (13, 14, 15)


def run_cli(tmp_path, *args):
    return main([*args, "--output", str(tmp_path)])


class TestCli:
    def test_train_one_round(self, tmp_path):
        assert run_cli(tmp_path, "train", "--max-rounds", "1") == 0
        rows = read_metrics_csv(tmp_path / "metrics_train.csv")
        assert len(rows) == 1 and rows[0].phase == "train" and rows[0].round == 1
        assert (tmp_path / "config.yaml").exists() and (tmp_path / "summary.json").exists()

    def test_deterministic_and_reproducible_from_snapshot(self, tmp_path):
        a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
        assert run_cli(a, "train", "--max-rounds", "15", "--seed-override", "3") == 0
        assert run_cli(b, "train", "--max-rounds", "15", "--seed-override", "3") == 0
        assert main(["train", "--config", str(a / "config.yaml"), "--output", str(c)]) == 0
        ref = (a / "metrics_train.csv").read_bytes()
        assert ref == (b / "metrics_train.csv").read_bytes() == (c / "metrics_train.csv").read_bytes()
        assert (a / "plot_data.csv").read_bytes() == (b / "plot_data.csv").read_bytes()

    def test_unlearn_artifacts(self, tmp_path):
        assert run_cli(tmp_path, "unlearn") == 0
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["passed"] and summary["sfu"]["acc_forgotten_after"] <= 0.02
        assert summary["sfu"]["acc_retained_after"] >= summary["sfu"]["acc_retained_before"] - 0.02
        assert summary["sfu"]["rounds_used"] >= 1
        directive = json.loads((tmp_path / "directive.json").read_text())
        assert directive == {"target_classes": [5], "alpha": 9.0, "forget_teacher_seed": 1234, "max_rounds": 10}
        rows = read_metrics_csv(tmp_path / "metrics_sfu.csv")
        phases = "".join(r.phase[0] for r in rows)
        assert phases == "t" * 300 + "u" * summary["sfu"]["rounds_used"] + "r" * 5
        assert [r.round for r in rows] == list(range(1, len(rows) + 1))
        header = (tmp_path / "plot_data.csv").read_text().splitlines()[0]
        assert header == "run_label,round,metric_name,value"

    def test_unmet_threshold_exit_status(self, tmp_path):
        cfg = ExperimentConfig.from_dict({"experiment": "unlearn", "output_dir": str(tmp_path),
                                          "fl": {"max_rounds": 60},
                                          "unlearn": {"unlearn_lr": 1e-5, "max_unlearn_rounds": 1}})
        assert pipeline.run_experiment(cfg) == pipeline.EXIT_THRESHOLD
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["passed"] is False and summary["checks"]["forgetting_criterion"] is False

    def test_error_marker(self, tmp_path, monkeypatch):
        def boom(cfg, sink):
            sink.add_run("train", [])
            raise RuntimeError("disk on fire")
        monkeypatch.setitem(pipeline.FLOWS, "train", boom)
        assert run_cli(tmp_path, "train") == pipeline.EXIT_ERROR
        assert "disk on fire" in (tmp_path / "ERROR").read_text()
        assert (tmp_path / "config.yaml").exists() and (tmp_path / "metrics_train.csv").exists()

    def test_stale_marker_removed(self, tmp_path):
        (tmp_path / "ERROR").write_text("old")
        assert run_cli(tmp_path, "train", "--max-rounds", "1") == 0
        assert not (tmp_path / "ERROR").exists()

    def test_config_error_status(self, tmp_path, capsys):
        path = write(tmp_path, {"fl": {"participation_fraction": 0}})
        assert main(["train", "--config", str(path), "--output", str(tmp_path / "o")]) == pipeline.EXIT_ERROR
        assert "fl.participation_fraction" in capsys.readouterr().err

    def test_module_entry_point(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "sfu", "train", "--max-rounds", "2", "--output", str(tmp_path)],
                              capture_output=True, text=True, timeout=120)
        assert proc.returncode == 0, proc.stderr
        assert len(read_metrics_csv(tmp_path / "metrics_train.csv")) == 2

    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit):
            main(["finetune"])
