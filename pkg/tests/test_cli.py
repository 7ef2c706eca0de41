import json

import numpy as np
import pytest

from voxreg import io as vio
from voxreg.cli import main
from voxreg.network import ArchConfig, build_network, param_count

TINY = ["--levels", "3", "--base-channels", "4", "--max-channels", "8", "--branch-channels", "4"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "data"), "--dims", "16", "16", "16", "--pairs", "2", "--blobs", "6"]) == 0
    return root


@pytest.fixture(scope="module")
def trained(data):
    out = data / "run"
    rc = main(["train", "--data", str(data / "data"), "--out", str(out), "--steps", "4", "--seed", "2", *TINY])
    assert rc == 0
    return out


class TestSynth:
    def test_files_written(self, data):
        pair = data / "data" / "pair_001"
        for name in ("fixed", "moving", "u_true", "labels_fixed", "labels_moving"):
            assert (pair / f"{name}.raw").exists() and (pair / f"{name}.json").exists()
        assert vio.load_field(pair / "u_true").shape == (3, 16, 16, 16)

    def test_zero_amplitude(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path), "--dims", "8", "8", "8", "--amplitude", "0"]) == 0
        p = tmp_path / "pair_000"
        np.testing.assert_array_equal(vio.load_volume(p / "fixed"), vio.load_volume(p / "moving"))

    def test_invalid_dims(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path), "--dims", "0", "8", "8"]) == 1
        assert main(["synth", "--out", str(tmp_path), "--dims", "12", "16", "16", "--levels", "4"]) == 1


class TestTrain:
    def test_outputs(self, trained):
        lines = (trained / "loss.csv").read_text().splitlines()
        assert lines[0] == "step,lncc_term,reg_term,total" and len(lines) == 5
        ck = vio.load_checkpoint(trained / "checkpoint.vxrg")
        assert ck.step == 4 and ck.config["train"]["seed"] == 2

    def test_reproducible(self, data, trained, tmp_path):
        rc = main(["train", "--data", str(data / "data"), "--out", str(tmp_path), "--steps", "4", "--seed", "2", *TINY])
        assert rc == 0
        assert (tmp_path / "loss.csv").read_bytes() == (trained / "loss.csv").read_bytes()

    def test_empty_dir(self, tmp_path):
        assert main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == 2

    def test_config_file_and_precedence(self, data, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"lr": 0.5, "alpha": 2.0, "steps": 1, "levels": 3, "base_channels": 4,
                                   "max_channels": 8, "branch_channels": 4}))
        rc = main(["train", "--config", str(cfg), "--lr", "0.001", "--data", str(data / "data"), "--out", str(tmp_path / "o")])
        assert rc == 0
        echoed = json.loads(capsys.readouterr().err.splitlines()[0])["config"]
        assert echoed["lr"] == 0.001 and echoed["alpha"] == 2.0

    def test_unknown_config_key(self, data, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"learning_rate": 1}))
        assert main(["train", "--config", str(cfg), "--data", str(data / "data"), "--out", str(tmp_path)]) == 1


class TestRegisterEvaluate:
    def test_register_twice_identical(self, data, trained, tmp_path, capsys):
        p = data / "data" / "pair_000"
        for tag in ("a", "b"):
            rc = main(["register", "--checkpoint", str(trained / "checkpoint.vxrg"), "--fixed", str(p / "fixed"),
                       "--moving", str(p / "moving"), "--out-field", str(tmp_path / f"u{tag}"),
                       "--out-warped", str(tmp_path / f"w{tag}")])
            assert rc == 0
        assert "inference time" in capsys.readouterr().out
        assert (tmp_path / "ua.raw").read_bytes() == (tmp_path / "ub.raw").read_bytes()
        assert np.abs(vio.load_field(tmp_path / "ua")).max() < 0.5

    def test_dim_mismatch(self, trained, tmp_path):
        vio.save_volume(np.zeros((16, 16, 16)), tmp_path / "f")
        vio.save_volume(np.zeros((16, 16, 8)), tmp_path / "m")
        rc = main(["register", "--checkpoint", str(trained / "checkpoint.vxrg"), "--fixed", str(tmp_path / "f"),
                   "--moving", str(tmp_path / "m"), "--out-field", str(tmp_path / "u"), "--out-warped", str(tmp_path / "w")])
        assert rc == 2

    def test_evaluate_identity(self, data, tmp_path, capsys):
        p = data / "data" / "pair_000"
        vio.save_field(np.zeros((3, 16, 16, 16)), tmp_path / "zero")
        rc = main(["evaluate", "--field", str(tmp_path / "zero"), "--fixed-labels", str(p / "labels_fixed"),
                   "--moving-labels", str(p / "labels_fixed"), "--out-json", str(tmp_path / "r.json"),
                   "--out-dice-csv", str(tmp_path / "d.csv")])
        assert rc == 0
        report = json.loads((tmp_path / "r.json").read_text())
        assert report["mean_dice"] == 1.0 and report["fnj"] == 0.0
        assert (tmp_path / "d.csv").read_text().startswith("label,dice")

    def test_evaluate_from_checkpoint(self, data, trained, tmp_path):
        p = data / "data" / "pair_000"
        rc = main(["evaluate", "--checkpoint", str(trained / "checkpoint.vxrg"), "--fixed", str(p / "fixed"),
                   "--moving", str(p / "moving"), "--out-csv", str(tmp_path / "r.csv")])
        assert rc == 0
        header = (tmp_path / "r.csv").read_text().splitlines()[0].split(",")
        assert "lncc_term" in header and "total" in header

    def test_evaluate_needs_inputs(self):
        assert main(["evaluate"]) == 1


class TestParamsGradcheck:
    def test_params_default(self, capsys):
        assert main(["params"]) == 0
        n = int(capsys.readouterr().out.strip())
        assert n == param_count(build_network(ArchConfig())) and 0.4e6 <= n <= 1.0e6

    def test_params_tiny(self, capsys):
        assert main(["params", "--base-channels", "4"]) == 0
        n = int(capsys.readouterr().out.strip())
        assert n == param_count(build_network(ArchConfig(base_channels=4)))

    def test_params_invalid(self):
        assert main(["params", "--dilations", "2,1"]) == 1
        assert main(["params", "--dilations", "a,b"]) == 1

    def test_unknown_flag(self):
        assert main(["params", "--bogus"]) == 1
        assert main(["frobnicate"]) == 1
        assert main(["params", "--help"]) == 0

    def test_gradcheck_passes(self, capsys):
        assert main(["gradcheck", "--seed", "3"]) == 0
        assert "all checks passed" in capsys.readouterr().out

    def test_gradcheck_negative_control(self, monkeypatch):
        from voxreg import conv as conv_mod

        real = conv_mod.conv3d_backward
        monkeypatch.setattr(conv_mod, "conv3d_backward", lambda g, w, c: tuple(a * 1.1 for a in real(g, w, c)))
        assert main(["gradcheck"]) == 3

    def test_threads_env(self, monkeypatch, capsys):
        monkeypatch.setenv("VOXREG_THREADS", "1")
        assert main(["params", "--levels", "3"]) == 0
        assert json.loads(capsys.readouterr().err.splitlines()[0])["config"]["threads"] == 1
