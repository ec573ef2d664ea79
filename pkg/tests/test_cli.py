import json
import os
import subprocess
import sys

import numpy as np
import pytest

from topopatch.cli import run_command
from topopatch.synth import PhantomSpec, TopologySpec, generate_cohort, spec_to_json
from topopatch.volume import Volume3D, load_volume, save_volume


@pytest.fixture()
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


def test_unknown_subcommand_is_usage_error(workdir):
    assert run_command(["frobnicate"]) == 1


def test_missing_required_flag_is_usage_error(workdir):
    assert run_command(["synth"]) == 1


def test_synth_success(workdir):
    spec = PhantomSpec(dims=(12, 12, 12), patch_dims=(6, 6, 6), n_subjects=(2, 2),
                       images_per_subject=(1, 1), noise_sigma=0.01, seed=1)
    (workdir / "spec.json").write_text(spec_to_json(spec))
    assert run_command(["synth", "--spec", "spec.json", "--out", "data"]) == 0
    assert (workdir / "data" / "manifest.jsonl").is_file()


def test_synth_missing_spec_is_data_error(workdir):
    assert run_command(["synth", "--spec", "missing.json", "--out", "d"]) == 2


def test_ph_missing_input_is_data_error(workdir):
    assert run_command(["ph", "--in", "missing.rvol", "--out", "d.csv"]) == 2


def test_ph_and_pi_single_file(workdir, rng):
    v = Volume3D(rng.random((8, 8, 8), dtype=np.float32))
    save_volume(v, "v.rvol")
    assert run_command(["ph", "--in", "v.rvol", "--out", "d.csv"]) == 0
    text = open("d.csv").read().splitlines()
    assert text[0] == "dim,birth,death"
    assert run_command(["pi", "--in", "d.csv", "--out", "pi.rvol", "--dim", "1"]) == 0
    img = load_volume("pi.rvol")
    assert img.dims == (50, 50, 1)


def test_patches_roundtrip(workdir, rng):
    v = Volume3D(rng.random((6, 6, 6), dtype=np.float32))
    save_volume(v, "v.rvol")
    assert run_command(["patches", "--in", "v.rvol", "--out", "out",
                        "--patch-dims", "3,3,3"]) == 0
    index = json.load(open("out/patches.json"))
    assert len(index["patches"]) == 8


def test_bad_config_is_data_error(workdir):
    (workdir / "cfg.json").write_text(json.dumps({"preprocess": {"downsample": 0}}))
    assert run_command(["preprocess", "--config", "cfg.json"]) == 2


def test_evaluate_micro_deterministic(workdir):
    spec = PhantomSpec(dims=(20, 24, 20), patch_dims=(10, 12, 10), n_subjects=(4, 4),
                       images_per_subject=(1, 1), noise_sigma=0.02,
                       topology=TopologySpec(0, 1, (2.5, 3.0)), seed=2)
    manifest = generate_cohort(spec, workdir / "data")
    cfg = {
        "manifest": str(manifest), "work_dir": "w1",
        "input_dims": [20, 24, 20], "patch_dims": [10, 12, 10],
        "ph": {"dims": [0, 2]},
        "pi": {"resolution": [16, 16], "dim": 2, "scale": 20.0},
        "train": {"learning_rate": 2e-3, "batch_size": 4, "max_epochs": 4, "patience": 4},
        "ensemble": {"lr_grid": [1.0], "l1_grid": [1e-3], "best_patch": [0, 0, 0]},
        "cv": {"k": 2, "runs": 1, "seed": 4},
        "patch_subset": [[0, 0, 0]],
    }
    (workdir / "cfg.json").write_text(json.dumps(cfg))
    assert run_command(["evaluate", "--config", "cfg.json"]) == 0
    r1 = open("w1/results.json").read()
    assert run_command(["evaluate", "--config", "cfg.json", "--out", "w2"]) == 0
    r2 = open("w2/results.json").read()
    assert r1 == r2


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "topopatch.cli"],
                         capture_output=True, text=True)
    assert out.returncode == 1  # no subcommand is a usage error
