import json
import os

import numpy as np
import pytest

from mico.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL, EXIT_OK, main


def synth_config(tmp_path, **kw):
    cfg = dict(n_bags=24, d=6, seed=0, task="subtype", m_range=[5, 10],
               n_prototypes=3)
    cfg.update(kw)
    path = tmp_path / "synth.json"
    path.write_text(json.dumps(cfg))
    return str(path)


TRAIN_FLAGS = ["--seed", "3", "--epochs", "2", "--anchor-count", "4",
               "--layers", "2", "--task", "subtype"]


def make_dataset(tmp_path, **kw):
    data_dir = str(tmp_path / "data")
    assert main(["synth", "--config", synth_config(tmp_path, **kw),
                 "--out", data_dir]) == EXIT_OK
    return data_dir


class TestExitCodes:
    def test_synth_ok(self, tmp_path, capsys):
        make_dataset(tmp_path)
        assert "wrote 24 bags" in capsys.readouterr().out

    def test_bad_synth_config_returns_config_error(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"n_bags": 5, "d": 4, "seed": 0,
                                    "n_prototypes": 1}))
        assert main(["synth", "--config", str(path),
                     "--out", str(tmp_path / "d")]) == EXIT_CONFIG

    def test_unknown_synth_field_returns_config_error(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"n_bags": 5, "d": 4, "seed": 0, "bogus": 1}))
        assert main(["synth", "--config", str(path),
                     "--out", str(tmp_path / "d")]) == EXIT_CONFIG

    def test_missing_dataset_returns_data_error(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "nowhere"),
                     "--out", str(tmp_path / "out")] + TRAIN_FLAGS) == EXIT_DATA

    def test_corrupt_bag_returns_data_error(self, tmp_path):
        data_dir = make_dataset(tmp_path)
        bag_path = os.path.join(data_dir, "bag0000.mbag")
        raw = bytearray(open(bag_path, "rb").read())
        raw[-10] ^= 0xFF
        open(bag_path, "wb").write(bytes(raw))
        assert main(["train", "--data", data_dir,
                     "--out", str(tmp_path / "out")] + TRAIN_FLAGS) == EXIT_DATA

    def test_task_mismatch_returns_config_error(self, tmp_path):
        data_dir = make_dataset(tmp_path)
        args = ["train", "--data", data_dir, "--out", str(tmp_path / "out"),
                "--seed", "3", "--epochs", "1", "--anchor-count", "4",
                "--layers", "2", "--task", "survival"]
        assert main(args) == EXIT_CONFIG

    def test_gradcheck_ok(self, capsys):
        assert main(["gradcheck", "--seed", "0"]) == EXIT_OK
        assert "gradient check passed" in capsys.readouterr().out


class TestFullFlow:
    def test_synth_train_evaluate_export(self, tmp_path, capsys):
        data_dir = make_dataset(tmp_path)
        out_dir = str(tmp_path / "run")

        assert main(["train", "--data", data_dir, "--out", out_dir]
                    + TRAIN_FLAGS) == EXIT_OK
        out = capsys.readouterr().out
        assert "auc:" in out and "report.json" in out
        assert os.path.exists(os.path.join(out_dir, "report.json"))

        ckpt = os.path.join(out_dir, "fold0.mico")
        assert main(["evaluate", "--checkpoint", ckpt,
                     "--data", data_dir]) == EXIT_OK
        metrics = json.loads(capsys.readouterr().out)
        assert set(metrics) == {"acc", "f1", "auc"}

        export_path = str(tmp_path / "assign.txt")
        assert main(["export-assignments", "--checkpoint", ckpt,
                     "--bag", os.path.join(data_dir, "bag0001.mbag"),
                     "--out", export_path]) == EXIT_OK
        with open(export_path) as f:
            assert f.readline().startswith("# instance")

    def test_config_file_merged_with_flag_overrides(self, tmp_path, capsys):
        data_dir = make_dataset(tmp_path)
        cfg_path = tmp_path / "train.json"
        cfg_path.write_text(json.dumps({"task": "subtype", "epochs": 5,
                                        "anchor_count": 4, "layers": 2}))
        out_dir = str(tmp_path / "run")
        assert main(["train", "--data", data_dir, "--out", out_dir,
                     "--config", str(cfg_path), "--seed", "3",
                     "--epochs", "1"]) == EXIT_OK
        report = json.load(open(os.path.join(out_dir, "report.json")))
        assert report["config"]["epochs"] == 1  # flag wins over file

    def test_ablate_prints_table(self, tmp_path, capsys):
        data_dir = make_dataset(tmp_path)
        args = ["ablate", "--data", data_dir, "--out", str(tmp_path / "abl"),
                "--seed", "3", "--epochs", "1", "--anchor-count", "4",
                "--layers", "2", "--task", "subtype", "--n-folds", "2"]
        assert main(args) == EXIT_OK
        out = capsys.readouterr().out
        assert "w/o route" in out and "full" in out

    def test_sweep_anchors(self, tmp_path, capsys):
        data_dir = make_dataset(tmp_path)
        args = ["sweep-anchors", "--data", data_dir,
                "--out", str(tmp_path / "sweep"), "--counts", "4,8",
                "--seed", "3", "--epochs", "1", "--anchor-count", "4",
                "--layers", "2", "--task", "subtype", "--n-folds", "2"]
        assert main(args) == EXIT_OK
        out = capsys.readouterr().out
        assert "4 anchors" in out and "8 anchors" in out

    def test_sweep_bad_counts_returns_config_error(self, tmp_path):
        data_dir = make_dataset(tmp_path)
        args = ["sweep-anchors", "--data", data_dir,
                "--out", str(tmp_path / "sweep"), "--counts", "4,nope",
                "--seed", "3", "--task", "subtype"]
        assert main(args) == EXIT_CONFIG
