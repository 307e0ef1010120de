#!/usr/bin/env python3
"""
End-to-end tests of the experiment pipeline and the command line on a tiny synthetic task
"""

import json
import os

import pytest

from error_handler import PipelineStageError
from experiment_config import parse_experiment_config
from main import EXIT_OK, EXIT_STAGE_FAILED, EXIT_USAGE, main
from pipeline import run_attack, run_eval, run_experiment, run_pretrain, run_seed_sweep, run_train
from report_store import read_results_csv
from visualize import PIL_AVAILABLE

TINY_CONFIG = {
    "name": "tiny",
    "task": {"kind": "image-toy",
             "synthetic": {"num_samples": 48, "image_size": 8, "margin": 1.0, "noise": 0.1, "blob_sigma": 2.0}},
    "models": {"target": [{"out_channels": 4, "pool": True}, {"out_channels": 5}],
               "substitute": [{"out_channels": 4, "pool": True}, {"out_channels": 6}]},
    "attacks": {"pgd": {"t_max": 2}, "roa": {"t_max": 2},
                "eval_samples": 12, "eval_batch_size": 12, "preview_samples": 4},
    "training": {"substitute": {"epochs": 1, "batch_size": 16},
                 "target": {"epochs": 1, "batch_size": 16},
                 "baseline": {"epochs": 1, "batch_size": 16}},
    "seed": 0,
}


def tiny_config(**overrides):
    data = json.loads(json.dumps(TINY_CONFIG))
    data.update(overrides)
    return parse_experiment_config(data)


def write_tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY_CONFIG))
    return str(path)


def test_run_writes_every_output(tmp_path):
    out = str(tmp_path / "run")
    report = run_experiment(tiny_config(), out)
    for name in ("report.json", "report.schema.json", "results.csv", "manifest.json", "substitute.ckpt",
                 "abnn_target.ckpt", "no_defense.ckpt", "pgd_at.ckpt", "adversarial_pgd.npz"):
        assert os.path.exists(os.path.join(out, name)), name
    if PIL_AVAILABLE:
        assert os.path.exists(os.path.join(out, "attack_preview.png"))

    rows = read_results_csv(os.path.join(out, "results.csv"))
    assert [row["method"] for row in rows] == ["no-defense", "abnn", "pgd-at"]
    assert list(rows[0]) == ["method", "clean_acc", "pgd_acc", "roa_acc", "passes_per_step"]
    assert [row["passes_per_step"] for row in rows] == ["2", "3", "6"]

    abnn = report["methods"]["abnn"]
    assert abnn["total_passes"] == 3 * abnn["steps"]
    assert report["all_costs_verified"]
    assert report["substitute_unchanged"]
    assert set(report["bn_stat_shift"]) == {"target", "substitute"}


def test_same_seed_reruns_are_bit_identical(tmp_path):
    run_experiment(tiny_config(), str(tmp_path / "a"))
    run_experiment(tiny_config(), str(tmp_path / "b"))
    first = (tmp_path / "a" / "results.csv").read_bytes()
    assert first == (tmp_path / "b" / "results.csv").read_bytes()


def test_stage_verbs_share_an_output_directory(tmp_path):
    out = str(tmp_path / "staged")
    config = tiny_config()
    run_pretrain(config, out)
    run_train(config, out)
    run_attack(config, out)
    report = run_eval(config, out)
    assert report["all_costs_verified"]
    assert report["substitute_unchanged"]


def test_training_without_substitute_fails_in_train_stage(tmp_path):
    with pytest.raises(PipelineStageError) as info:
        run_train(tiny_config(), str(tmp_path / "empty"))
    assert info.value.stage == "train"
    assert info.value.report["error_type"] == "checkpoint"


def test_seed_sweep_is_sorted_with_medians(tmp_path):
    merged = run_seed_sweep(tiny_config(), [1, 0], str(tmp_path / "sweep"))
    assert merged["seeds"] == [0, 1]
    assert [run["seed"] for run in merged["runs"]] == [0, 1]
    assert set(merged["medians"]) == {"no-defense", "abnn", "pgd-at"}
    assert os.path.exists(tmp_path / "sweep" / "sweep.json")


def test_cli_costmodel(capsys):
    assert main(["costmodel", "t_max=5"]) == EXIT_OK
    output = capsys.readouterr().out
    assert "12N" in output and "4.0000" in output
    assert main(["costmodel", "t_max=0"]) == EXIT_USAGE


def test_cli_run_and_errors(tmp_path, capsys):
    config = write_tiny_config(tmp_path)
    assert main(["run", "--config", config, "--out", str(tmp_path / "cli")]) == EXIT_OK
    assert os.path.exists(tmp_path / "cli" / "results.csv")

    bad = tmp_path / "bad.json"
    bad.write_text('{"seed": 0, "colour": "blue"}')
    assert main(["run", "--config", str(bad)]) == EXIT_USAGE
    assert "colour" in capsys.readouterr().err

    assert main(["train", "--config", config, "--out", str(tmp_path / "fresh")]) == EXIT_STAGE_FAILED
    assert "[train]" in capsys.readouterr().err


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-v"]))
