"""Command-line interface tests: commands, file plumbing, exit codes."""

import json
import os

import numpy as np
import pytest

from xbarsim import cli
from xbarsim.circuit import oracle_solve
from xbarsim.config import CrossbarConfig
from xbarsim.errors import SolverError
from xbarsim.metrics import gen_input, gen_kernel
from xbarsim.netrunner import build_tiny_model, save_model, save_tensor


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def test_simulate_single_cell(tmp_path):
    save_tensor(tmp_path / "g.mten", np.array([[1.0 / 15_000.0]]))
    save_tensor(tmp_path / "v.mten", np.array([0.2]))
    rc = cli.main(["simulate", "--conductance", str(tmp_path / "g.mten"),
                   "--input", str(tmp_path / "v.mten"),
                   "--out", str(tmp_path / "out.json")])
    assert rc == 0
    out = read_json(tmp_path / "out.json")
    assert out["i_out"][0] == pytest.approx(0.2 / 15_004.0, rel=1e-6)


def test_simulate_matches_oracle_from_files(tmp_path):
    rng = np.random.default_rng(0)
    config = CrossbarConfig(4, 3)
    g = rng.uniform(config.g_min, config.g_max * 0.99, size=(4, 3))
    v = rng.uniform(0.0, 0.19, size=4)
    save_tensor(tmp_path / "g.mten", g)
    save_tensor(tmp_path / "v.mten", v)
    rc = cli.main(["simulate", "--conductance", str(tmp_path / "g.mten"),
                   "--input", str(tmp_path / "v.mten"),
                   "--out", str(tmp_path / "out.json")])
    assert rc == 0
    # the float32 tensor files are the inputs of record for the oracle too
    g32 = g.astype(np.float32).astype(float)
    v32 = v.astype(np.float32).astype(float)
    ref = oracle_solve(config, g32, v32)
    got = np.array(read_json(tmp_path / "out.json")["i_out"])
    assert np.abs(got - ref.i_out).max() / np.abs(ref.i_out).max() <= 1e-9


def test_missing_file_exits_with_usage_code(tmp_path):
    rc = cli.main(["simulate", "--conductance", str(tmp_path / "nope.mten"),
                   "--input", str(tmp_path / "nope2.mten"),
                   "--out", str(tmp_path / "out.json")])
    assert rc == cli.EXIT_USAGE


def test_invalid_bits_exits_with_validation_code(tmp_path):
    (tmp_path / "cfg.json").write_text(json.dumps({"dac_bits": 0}))
    save_tensor(tmp_path / "w.mten", np.ones((2, 2)))
    rc = cli.main(["build-engine", "--config", str(tmp_path / "cfg.json"),
                   "--weights", str(tmp_path / "w.mten"),
                   "--out", str(tmp_path / "e.json")])
    assert rc == cli.EXIT_VALIDATION


def test_unknown_config_key_rejected(tmp_path):
    (tmp_path / "cfg.json").write_text(json.dumps({"dca_bits": 8}))
    save_tensor(tmp_path / "w.mten", np.ones((2, 2)))
    rc = cli.main(["build-engine", "--config", str(tmp_path / "cfg.json"),
                   "--weights", str(tmp_path / "w.mten"),
                   "--out", str(tmp_path / "e.json")])
    assert rc == cli.EXIT_VALIDATION


def test_numeric_failure_exit_code(monkeypatch, tmp_path):
    def boom(*args, **kwargs):
        raise SolverError("synthetic numeric failure")
    monkeypatch.setattr(cli, "simulate", boom)
    save_tensor(tmp_path / "g.mten", np.full((1, 1), 1.0 / 20_000.0))
    save_tensor(tmp_path / "v.mten", np.array([0.1]))
    rc = cli.main(["simulate", "--conductance", str(tmp_path / "g.mten"),
                   "--input", str(tmp_path / "v.mten"),
                   "--out", str(tmp_path / "out.json")])
    assert rc == cli.EXIT_NUMERIC


def test_build_engine_is_idempotent(tmp_path):
    w = gen_kernel(1, (3, 3, 3, 4), 0).reshape(27, 4)
    save_tensor(tmp_path / "w.mten", w)
    for name in ("a", "b"):
        rc = cli.main(["build-engine", "--weights", str(tmp_path / "w.mten"),
                       "--out", str(tmp_path / f"{name}.json")])
        assert rc == 0
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    da = read_json(tmp_path / "a.json")
    db = read_json(tmp_path / "b.json")
    da.pop("blob_file"), db.pop("blob_file")
    assert da == db


def test_layer_exp_variant_report(tmp_path):
    rc = cli.main(["layer-exp", "--kernel-shape", "3x3x4x4", "--input-hw", "6",
                   "--sparsity", "0.5", "--out", str(tmp_path / "exp")])
    assert rc == 0
    lines = (tmp_path / "exp" / "variants.csv").read_text().strip().splitlines()
    assert lines[0] == "variant,mean,worst,samples,output_range"
    means = {row.split(",")[0]: float(row.split(",")[1]) for row in lines[1:]}
    assert set(means) == {"direct", "original_conversion",
                          "improved_uncalibrated", "improved"}
    assert means["improved"] < means["direct"]
    summary = read_json(tmp_path / "exp" / "summary.json")
    assert "improved" in summary


def test_layer_exp_amplitude_sweep(tmp_path):
    rc = cli.main(["layer-exp", "--kernel-shape", "2x2x2x2", "--input-hw", "4",
                   "--conv-amp-sweep", "--out", str(tmp_path / "exp")])
    assert rc == 0
    lines = (tmp_path / "exp" / "amplitude_sweep.csv").read_text().strip().splitlines()
    assert lines[0] == "fraction,mean,worst"
    assert len(lines) == 8   # header + 7 candidate amplitudes


def test_run_net_outputs(tmp_path):
    model = build_tiny_model(seed=1, channels=(3, 4), hw=6)
    save_model(model, tmp_path / "tiny.json")
    img_dir = tmp_path / "imgs"
    img_dir.mkdir()
    for i in range(3):
        save_tensor(img_dir / f"img{i}.mten", gen_input((6, 6, 3), 0.3, 40 + i))
    rc = cli.main(["run-net", "--model", str(tmp_path / "tiny.json"),
                   "--images", str(img_dir), "--bits", "none,8",
                   "--taps", "fc", "--out", str(tmp_path / "net")])
    assert rc == 0
    lines = (tmp_path / "net" / "accuracy.csv").read_text().strip().splitlines()
    assert lines[0] == "bits,mean_rel_err,worst_rel_err,agreement,images"
    assert len(lines) == 3
    tap = (tmp_path / "net" / "layer_fc.csv").read_text().strip().splitlines()
    assert tap[0] == "layer,window,column,ideal,actual,rel_err"
    assert len(tap) == 1 + 3 * 10   # 3 images x 10 output columns
    summary = read_json(tmp_path / "net" / "summary.json")
    assert {row["bits"] for row in summary["accuracy"]} == {"none", 8}


def test_outputs_deterministic_across_thread_settings(tmp_path, monkeypatch):
    model = build_tiny_model(seed=2, channels=(3, 4), hw=6)
    save_model(model, tmp_path / "tiny.json")
    img_dir = tmp_path / "imgs"
    img_dir.mkdir()
    for i in range(2):
        save_tensor(img_dir / f"img{i}.mten", gen_input((6, 6, 3), 0.3, 50 + i))
    outputs = {}
    for threads in ("1", "4"):
        monkeypatch.setenv("XBAR_THREADS", threads)
        out = tmp_path / f"net{threads}"
        rc = cli.main(["run-net", "--model", str(tmp_path / "tiny.json"),
                       "--images", str(img_dir), "--bits", "8",
                       "--out", str(out)])
        assert rc == 0
        outputs[threads] = {p.name: p.read_bytes()
                            for p in out.iterdir() if p.suffix != ".log"}
    assert outputs["1"] == outputs["4"]


def test_threads_flag_validation():
    assert cli.main(["--threads", "0", "simulate", "--conductance", "x",
                     "--input", "y", "--out", "z"]) == cli.EXIT_VALIDATION
