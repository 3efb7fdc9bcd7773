import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from gpff.cli import main, read_reference_csv
from gpff.config import default_config_dict, load_config
from gpff.exceptions import ConfigError
from gpff.plantsim import read_log_csv


def small_config(**plan):
    cfg = default_config_dict()
    cfg["trajectory"].update(displacement=0.05, dwell=0.2, lead=0.05, n_samples=None)
    cfg["plan"].update(scale_factors=[0.95, 1.0, 1.05], window={"n_c": 5, "n_ac": 10, "stride": 10},
                       eval_scales={"r1": 1.0, "r2": 1.02})
    cfg["plan"]["optimizer"]["max_iterations"] = 20
    cfg["plan"].update(plan)
    cfg["convergence"]["levels"] = [{"scale_factors": [0.95, 1.05], "stride": 20},
                                    {"scale_factors": [0.95, 1.0, 1.05], "stride": 5}]
    return cfg


def fixed_kernel_config(lengthscale):
    """Noise-free, stride 1, no hyperparameter tuning."""
    cfg = small_config(noise_std=0.0, sigma_n=0.0, kernel={"variant": "Matern32", "sigma_f": 1.0,
                       "lengthscales": [lengthscale] * 16, "periods": None})
    cfg["plan"]["optimizer"]["enabled"] = False
    cfg["plan"]["window"]["stride"] = 1
    return cfg


@pytest.fixture
def write_cfg(tmp_path):
    def _write(cfg, name="cfg.json"):
        path = tmp_path / name
        path.write_text(json.dumps(cfg))
        return str(path)

    return _write


def run(*argv):
    return main([str(a) for a in argv])


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


class TestConfig:
    def test_shipped_defaults(self):
        cfg = load_config()
        assert cfg.plant.Fc > 0
        assert cfg.build_plan().window.n_theta == 61
        assert set(cfg.eval_references()) == {"r1", "r2", "r3"}

    def test_unknown_key_rejected(self, write_cfg, capsys):
        cfg = default_config_dict()
        cfg["plant"]["mass"] = 1.0
        assert run("gen-ref", "--config", write_cfg(cfg)) == 2
        assert "plant.mass" in capsys.readouterr().err

    def test_missing_section(self, write_cfg, capsys):
        cfg = default_config_dict()
        del cfg["trajectory"]
        assert run("gen-ref", "--config", write_cfg(cfg)) == 2
        err = capsys.readouterr().err
        assert "config error" in err and "trajectory" in err

    def test_wrong_version(self, write_cfg):
        cfg = default_config_dict()
        cfg["schema_version"] = 2
        with pytest.raises(ConfigError):
            load_config(write_cfg(cfg))

    def test_invalid_json(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text('{"seed": 0,\n  oops}')
        assert run("gen-ref", "--config", bad) == 2
        assert "bad.json:2" in capsys.readouterr().err

    def test_semantic_validation(self, write_cfg):
        cfg = default_config_dict()
        cfg["plan"]["scale_factors"] = []
        with pytest.raises(ConfigError):
            load_config(write_cfg(cfg))


class TestGenRef:
    def test_default(self, tmp_path):
        assert run("gen-ref", "--out", tmp_path) == 0
        rows = read_csv(tmp_path / "reference.csv")
        assert rows[0] == ["t", "r"] and len(rows) == 4502

    def test_scaled(self, tmp_path):
        run("gen-ref", "--out", tmp_path, "--file", tmp_path / "a.csv")
        run("gen-ref", "--out", tmp_path, "--file", tmp_path / "b.csv", "--scale", 1.05)
        a, b = read_reference_csv(tmp_path / "a.csv"), read_reference_csv(tmp_path / "b.csv")
        np.testing.assert_array_equal(b, 1.05 * a)

    def test_zero_displacement(self, tmp_path, write_cfg):
        cfg = default_config_dict()
        cfg["trajectory"]["displacement"] = 0.0
        assert run("gen-ref", "--config", write_cfg(cfg), "--out", tmp_path) == 0
        assert np.all(read_reference_csv(tmp_path / "reference.csv") == 0.0)

    def test_infeasible(self, tmp_path, write_cfg, capsys):
        cfg = default_config_dict()
        cfg["trajectory"]["n_samples"] = 10
        # caught while validating the config, before anything is written
        assert run("gen-ref", "--config", write_cfg(cfg), "--out", tmp_path) == 2
        assert "config error" in capsys.readouterr().err
        assert not (tmp_path / "reference.csv").exists()


class TestSimulate:
    def test_repetitions_and_determinism(self, tmp_path, write_cfg):
        path = write_cfg(small_config(repetitions=2))
        assert run("simulate", "--config", path, "--out", tmp_path / "a") == 0
        assert run("simulate", "--config", path, "--out", tmp_path / "b") == 0
        assert run("simulate", "--config", path, "--out", tmp_path / "c", "--seed", 5) == 0
        files = sorted(p.name for p in (tmp_path / "a" / "logs").iterdir())
        assert len(files) == 6 and "train_00_rep1.csv" in files
        for name in files:
            a = (tmp_path / "a" / "logs" / name).read_bytes()
            assert a == (tmp_path / "b" / "logs" / name).read_bytes()
            assert a != (tmp_path / "c" / "logs" / name).read_bytes()

    def test_exact_inverse_tracks(self, tmp_path, write_cfg):
        path = write_cfg(small_config(noise_std=0.0))
        assert run("simulate", "--config", path, "--out", tmp_path, "--feedforward", "exact") == 0
        for p in (tmp_path / "logs").iterdir():
            log = read_log_csv(p)
            assert np.abs(log.e).max() <= 1e-9 * np.abs(log.r).max()

    def test_friction_override(self, tmp_path, write_cfg):
        path = write_cfg(small_config())
        run("simulate", "--config", path, "--out", tmp_path / "v")
        run("simulate", "--config", path, "--out", tmp_path / "o", "--friction-on", "output_sign")
        a = read_log_csv(tmp_path / "v" / "logs" / "train_00_rep0.csv")
        b = read_log_csv(tmp_path / "o" / "logs" / "train_00_rep0.csv")
        assert not np.array_equal(a.y, b.y)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("trained")
    cfg_path = root / "cfg.json"
    cfg_path.write_text(json.dumps(small_config()))
    assert main(["simulate", "--config", str(cfg_path), "--out", str(root)]) == 0
    assert main(["train", "--config", str(cfg_path), "--out", str(root), "--logs", str(root / "logs")]) == 0
    return root, cfg_path


class TestTrain:
    def test_outputs(self, trained):
        root, _ = trained
        summary = json.loads((root / "train_summary.json").read_text())
        n = len(read_log_csv(root / "logs" / "train_00_rep0.csv"))
        assert summary["M"] == 3 * len(range(0, n, 10))
        assert summary["n_theta"] == 16
        assert read_csv(root / "trace.csv")[0][:4] == ["iteration", "restart", "lml", "grad_norm"]

    def test_retrain_identical(self, trained, tmp_path):
        root, cfg = trained
        assert run("train", "--config", cfg, "--out", tmp_path, "--logs", root / "logs") == 0
        assert (tmp_path / "model.gpff").read_bytes() == (root / "model.gpff").read_bytes()
        assert (tmp_path / "trace.csv").read_bytes() == (root / "trace.csv").read_bytes()

    def test_stride_override(self, trained, tmp_path):
        root, cfg = trained
        assert run("train", "--config", cfg, "--out", tmp_path, "--logs", root / "logs", "--stride", 40) == 0
        n = len(read_log_csv(root / "logs" / "train_00_rep0.csv"))
        assert json.loads((tmp_path / "train_summary.json").read_text())["M"] == 3 * len(range(0, n, 40))

    def test_kernel_override(self, trained, tmp_path):
        root, cfg = trained
        run("train", "--config", cfg, "--out", tmp_path, "--logs", root / "logs", "--kernel", "SquaredExponential")
        assert json.loads((tmp_path / "train_summary.json").read_text())["kernel"]["variant"] == "SquaredExponential"

    def test_corrupt_log(self, tmp_path, capsys):
        logs = tmp_path / "logs"
        logs.mkdir()
        (logs / "x.csv").write_text("t,r,y,u,e\n1,0,0,0,0\n2,0,0,??,0\n")
        assert run("train", "--out", tmp_path, "--logs", logs) == 3
        assert "x.csv:3" in capsys.readouterr().err


class TestPredict:
    def test_variance_column(self, trained, tmp_path):
        root, cfg = trained
        run("gen-ref", "--config", cfg, "--out", tmp_path)
        assert run("predict", "--config", cfg, "--out", tmp_path, "--model", root / "model.gpff",
                   "--reference", tmp_path / "reference.csv", "--variance") == 0
        rows = read_csv(tmp_path / "feedforward.csv")
        assert rows[0] == ["t", "u_ff", "variance"]
        assert len(rows) - 1 == len(read_reference_csv(tmp_path / "reference.csv"))
        assert all(float(r[2]) >= 0 for r in rows[1:])
        run("predict", "--config", cfg, "--out", tmp_path, "--model", root / "model.gpff",
            "--reference", tmp_path / "reference.csv")
        assert read_csv(tmp_path / "feedforward.csv")[0] == ["t", "u_ff"]

    def test_far_reference_reverts_to_prior(self, tmp_path, write_cfg):
        path = write_cfg(fixed_kernel_config(0.01))
        assert run("simulate", "--config", path, "--out", tmp_path, "--feedforward", "exact") == 0
        assert run("train", "--config", path, "--out", tmp_path, "--logs", tmp_path / "logs") == 0
        run("gen-ref", "--config", path, "--out", tmp_path, "--scale", 50)
        assert run("predict", "--config", path, "--out", tmp_path, "--model", tmp_path / "model.gpff",
            "--reference", tmp_path / "reference.csv", "--variance") == 0
        sf2 = 1.0
        rows = np.array(read_csv(tmp_path / "feedforward.csv")[1:], dtype=float)
        r = read_reference_csv(tmp_path / "reference.csv")
        moving = np.abs(r) > 0.5 * np.abs(r).max()
        assert np.abs(rows[moving, 1]).max() < 1e-3 * np.sqrt(sf2)
        np.testing.assert_allclose(rows[moving, 2], sf2, rtol=1e-3)

    def test_interpolates_training_reference(self, tmp_path, write_cfg):
        path = write_cfg(fixed_kernel_config(3e-4))
        assert run("simulate", "--config", path, "--out", tmp_path, "--feedforward", "exact") == 0
        assert run("train", "--config", path, "--out", tmp_path, "--logs", tmp_path / "logs") == 0
        log = tmp_path / "logs" / "train_01_rep0.csv"
        assert run("predict", "--config", path, "--out", tmp_path, "--model", tmp_path / "model.gpff",
                   "--reference", log) == 0
        u_ff = np.array(read_csv(tmp_path / "feedforward.csv")[1:], dtype=float)[:, 1]
        u = read_log_csv(log).u
        assert np.sqrt(np.mean((u_ff - u) ** 2)) <= 1e-3 * np.sqrt(np.mean(u ** 2))

    def test_bad_model(self, tmp_path, capsys):
        (tmp_path / "m").write_text("nope")
        (tmp_path / "r.csv").write_text("t,r\n1,0.0\n")
        assert run("predict", "--out", tmp_path, "--model", tmp_path / "m", "--reference", tmp_path / "r.csv") == 3
        assert "input error" in capsys.readouterr().err


def test_evaluate(trained, tmp_path):
    root, cfg = trained
    assert run("evaluate", "--config", cfg, "--out", tmp_path, "--model", root / "model.gpff") == 0
    rows = read_csv(tmp_path / "report.csv")
    assert rows[0] == ["reference_id", "controller_id", "l2_error", "linf_error"]
    assert [r[:2] for r in rows[1:]] == [["r1", "F(q)"], ["r1", "GP"], ["r2", "F(q)"], ["r2", "GP"]]


class TestReproduce:
    def test_byte_identical_and_layout(self, tmp_path, write_cfg):
        path = write_cfg(small_config())
        for name in ("a", "b"):
            assert run("reproduce-paper", "--config", path, "--out", tmp_path / name) == 0
        for name in ("report.csv", "report.txt", "report_meta.json", "model.gpff", "trace.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        text = (tmp_path / "a" / "report.txt").read_text()
        assert "||e||_2" in text and "||e||_inf" in text
        assert "r1 (in training set)" in text and "r2 (not in training set)" in text
        meta = json.loads((tmp_path / "a" / "report_meta.json").read_text())
        assert meta["steps"][0] == "choose_kernel" and meta["steps"][-1] == "evaluate"
        assert "runtime" not in json.dumps(meta)
        assert (tmp_path / "a" / "runtimes.json").exists()

    def test_stride_override(self, tmp_path, write_cfg):
        cfg = small_config(scale_factors=[1.0])
        cfg["plan"]["optimizer"]["max_iterations"] = 2
        path = write_cfg(cfg)
        assert run("reproduce-paper", "--config", path, "--out", tmp_path, "--stride", 1) == 0
        meta = json.loads((tmp_path / "report_meta.json").read_text())
        assert meta["window"]["stride"] == 1
        run("gen-ref", "--config", path, "--out", tmp_path)
        assert meta["M"] == len(read_reference_csv(tmp_path / "reference.csv"))


def test_convergence_study(tmp_path, write_cfg):
    cfg = small_config()
    cfg["convergence"]["lengthscale"] = 3e-4
    assert run("convergence-study", "--config", write_cfg(cfg), "--out", tmp_path) == 0
    rows = read_csv(tmp_path / "convergence.csv")
    assert rows[0] == ["level", "n_trajectories", "stride", "density", "rms_error", "rel_rms_error"]
    assert len(rows) == 3


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "gpff", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("gen-ref", "simulate", "train", "predict", "evaluate", "reproduce-paper", "convergence-study"):
        assert cmd in out.stdout


def test_usage_error():
    with pytest.raises(SystemExit) as info:
        main(["train"])
    assert info.value.code == 2
