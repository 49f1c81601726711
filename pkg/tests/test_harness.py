import json

import pytest
import torch
import torch.nn as nn

from augbackdoor.cli import main as cli_main
from augbackdoor.core import ConfigError, ExperimentReport, ImageDataset, load_report
from augbackdoor.harness import (
    DEFAULT_CONFIG,
    make_config,
    run_experiment,
    trigger_accuracy,
    trigger_error,
    validate_report,
)
from augbackdoor.trigger import LabelMap


def _row_dataset(labels):
    """Images whose class is encoded as a bright row, readable by _RowModel."""
    labels = torch.tensor(labels)
    images = torch.zeros(len(labels), 1, 28, 28)
    for i, y in enumerate(labels):
        images[i, 0, int(y), :] = 1.0
    return ImageDataset("rows", "test", images, labels, 10)


class _RowModel(nn.Module):
    def forward(self, x):
        return x[:, 0, :10, :].sum(dim=2)


class _ConstantModel(nn.Module):
    def __init__(self, cls):
        super().__init__()
        self.cls = cls

    def forward(self, x):
        logits = torch.zeros(x.shape[0], 10)
        logits[:, self.cls] = 1.0
        return logits


def _identity_trigger(img, i):
    return img


def _relabel_trigger(target_row):
    """Rewrites the bright row so _RowModel reads the given class."""

    def fn(img, i):
        out = torch.zeros_like(img)
        out[0, target_row, :] = 1.0
        return out

    return fn


class TestTriggerMetrics:
    def test_constant_model_hits_its_own_class(self):
        ds = _row_dataset([3, 4, 5, 6])
        assert trigger_accuracy(_ConstantModel(0), ds, _identity_trigger, target=0) == 1.0
        assert trigger_accuracy(_ConstantModel(1), ds, _identity_trigger, target=0) == 0.0

    def test_effective_trigger_scores_one(self):
        ds = _row_dataset([3, 4, 5, 6])
        acc = trigger_accuracy(_RowModel(), ds, _relabel_trigger(0), target=0)
        assert acc == 1.0

    def test_ineffective_trigger_scores_label_fraction(self):
        # identity trigger: model predicts the clean label, so only true 0s count
        ds = _row_dataset([0, 0, 4, 5])
        acc = trigger_accuracy(_RowModel(), ds, _identity_trigger, target=0)
        assert acc == pytest.approx(0.5)

    def test_label_map_expected_vector(self):
        # F maps class 1 to 0 and fixes everything else
        ds = _row_dataset([1, 1, 2, 3])
        acc = trigger_accuracy(_RowModel(), ds, _identity_trigger, target=0,
                               label_map=LabelMap(source=1, target=0))
        # clean predictions match F(y) only where F(y) == y
        assert acc == pytest.approx(0.5)

    def test_eligible_class_filter(self):
        ds = _row_dataset([0, 1, 1, 2])
        acc = trigger_accuracy(_RowModel(), ds, _relabel_trigger(7), target=7,
                               eligible_class=1)
        assert acc == 1.0
        with pytest.raises(ConfigError):
            trigger_accuracy(_RowModel(), ds, _identity_trigger, target=0,
                             eligible_class=9)

    def test_trigger_error_complements_clean_match(self):
        ds = _row_dataset([0, 1, 2, 3])
        assert trigger_error(_RowModel(), ds, _identity_trigger) == 0.0
        assert trigger_error(_RowModel(), ds, _relabel_trigger(9)) == 1.0

    def test_error_counts_any_flip_not_just_target(self):
        # trigger sends everything to class 5; examples already labelled 5 keep matching
        ds = _row_dataset([5, 1, 2, 5])
        assert trigger_error(_RowModel(), ds, _relabel_trigger(5)) == pytest.approx(0.5)


class TestConfig:
    def test_defaults_pass_validation(self):
        cfg = make_config({})
        assert cfg == DEFAULT_CONFIG

    def test_nested_override(self):
        cfg = make_config({"train": {"epochs": 3}, "attack": "simple"})
        assert cfg["train"]["epochs"] == 3
        assert cfg["train"]["batch_size"] == DEFAULT_CONFIG["train"]["batch_size"]

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            make_config({"trainn": {"epochs": 3}})
        with pytest.raises(ConfigError):
            make_config({"train": {"warmup": 1}})

    def test_unknown_attack_rejected(self):
        with pytest.raises(ConfigError):
            make_config({"attack": "distillation"})

    def test_missing_data_root(self, monkeypatch):
        monkeypatch.delenv("AUGBD_DATA_ROOT", raising=False)
        with pytest.raises(ConfigError):
            run_experiment({"train": {"epochs": 0}})


def _report(attack, metrics, curves=None, config_extra=None):
    cfg = make_config({"attack": attack, **(config_extra or {})})
    return ExperimentReport(config=cfg, seed=0, metrics=metrics,
                            curves=curves or {}, timestamps={})


class TestValidateReport:
    def test_complete_report_passes(self):
        metrics = {"clean_accuracy": 0.9, "trigger_accuracy": 0.1,
                   "delta_trigger_accuracy": 0.0}
        validate_report(_report("none", metrics))

    def test_missing_metric_rejected(self):
        with pytest.raises(ConfigError):
            validate_report(_report("none", {"clean_accuracy": 0.9}))

    def test_augmix_curve_length_enforced(self):
        metrics = {"clean_accuracy": 0.9, "trigger_accuracy": 0.1, "trigger_error": 0.1,
                   "delta_clean_accuracy": 0.0, "delta_trigger_accuracy": 0.0}
        good = _report("augmix", metrics, curves={"matching_error_0": [1.0] * 5},
                       config_extra={"augmix": {"iterations": 5}})
        validate_report(good)
        bad = _report("augmix", metrics, curves={"matching_error_0": [1.0, 2.0]},
                      config_extra={"augmix": {"iterations": 5}})
        with pytest.raises(ConfigError):
            validate_report(bad)


@pytest.fixture(scope="module")
def quick_config(data_root):
    return {
        "attack": "none",
        "seed": 11,
        "dataset": {"name": "mnist", "root": str(data_root),
                    "train_subset": 256, "test_subset": 128},
        "train": {"epochs": 1, "batch_size": 128},
    }


class TestRunExperiment:
    def test_none_attack_report(self, quick_config, tmp_path):
        report = run_experiment(quick_config, out_dir=tmp_path / "out")
        assert report.config["attack"] == "none"
        assert 0.0 <= report.metrics["clean_accuracy"] <= 1.0
        assert report.metrics["delta_trigger_accuracy"] == 0.0
        assert (tmp_path / "out" / "report.json").exists()
        assert (tmp_path / "out" / "curves.csv").exists()
        loaded = load_report(tmp_path / "out" / "report.json")
        assert loaded.metrics == report.metrics

    def test_report_carries_full_config_and_seed(self, quick_config):
        report = run_experiment(quick_config)
        assert report.seed == 11
        assert report.config["dataset"]["train_subset"] == 256
        assert report.config["train"]["lr"] == DEFAULT_CONFIG["train"]["lr"]
        assert report.timestamps["finished"] >= report.timestamps["started"]


class TestCli:
    def _write_config(self, tmp_path, cfg):
        path = tmp_path / "config.json"
        path.write_text(json.dumps(cfg))
        return str(path)

    def test_run_and_report_round_trip(self, quick_config, tmp_path, capsys):
        cfg_path = self._write_config(tmp_path, quick_config)
        out = tmp_path / "run"
        assert cli_main(["run", cfg_path, "--out", str(out)]) == 0
        metrics = json.loads(capsys.readouterr().out)
        assert "clean_accuracy" in metrics

        assert cli_main(["report", str(out / "report.json")]) == 0
        text = capsys.readouterr().out
        assert "attack: none" in text and "clean_accuracy" in text

        csv_out = tmp_path / "c.csv"
        assert cli_main(["curves", str(out / "report.json"), "--out", str(csv_out)]) == 0
        assert csv_out.exists()

    def test_baseline_forces_attack_off(self, quick_config, tmp_path, capsys):
        cfg = dict(quick_config, attack="simple")
        cfg_path = self._write_config(tmp_path, cfg)
        out = tmp_path / "base"
        assert cli_main(["baseline", cfg_path, "--out", str(out)]) == 0
        capsys.readouterr()
        report = load_report(out / "report.json")
        assert report.config["attack"] == "none"

    def test_missing_config_exits_2(self, tmp_path, capsys):
        assert cli_main(["run", str(tmp_path / "nope.json")]) == 2
        assert "error:" in capsys.readouterr().err

    def test_invalid_json_exits_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert cli_main(["run", str(bad)]) == 2
        assert "error:" in capsys.readouterr().err

    def test_bad_config_key_exits_2(self, tmp_path, capsys):
        cfg_path = self._write_config(tmp_path, {"no_such_section": 1})
        assert cli_main(["run", cfg_path]) == 2
        assert "error:" in capsys.readouterr().err
