import json
import subprocess
import sys

import numpy as np
import pytest

from acdc import cli
from acdc.cli import RunConfig, UsageError, aggregate, main, read_config_file, resolve_config
from acdc.dataio import DatasetManifest, load_stream, read_checkpoint, read_metrics
from acdc.drift import SynthSpec, synth_arrays

SYNTH = ["--u", "4", "--m", "2", "--n-source", "300", "--n-target", "120", "--seed", "5"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert main(["synth", "--out", str(d), *SYNTH]) == 0
    return d


def run(data, out, *extra):
    return main(["run", "--source", str(data / "source.json"), "--target", str(data / "target.json"),
                 "--out", str(out), "--window", "50", *extra])


def features(manifest_path):
    man = DatasetManifest.load(manifest_path)
    return np.stack([s.features for s in load_stream(man)])


class TestSynth:
    def test_sizes_match(self, data):
        assert DatasetManifest.load(data / "source.json").n == 300
        assert features(data / "source.json").shape == (300, 4)
        assert features(data / "target.json").shape == (120, 4)
        prov = json.loads((data / "target.json").read_text())["provenance"]
        assert prov["drift"]["z"] == 7 and len(prov["drift"]["boundaries"]) == 6

    def test_default_counts(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path), "--format", "packed"]) == 0
        assert DatasetManifest.load(tmp_path / "source.json").n == 20000
        assert DatasetManifest.load(tmp_path / "target.json").n == 8000

    def test_single_concept_is_undrifted(self, tmp_path):
        main(["synth", "--out", str(tmp_path), *SYNTH, "--z-source", "1", "--z-target", "1"])
        X_s, _, X_t, _ = synth_arrays(SynthSpec(u=4, m=2, n_source=300, n_target=120, seed=5))
        np.testing.assert_array_equal(features(tmp_path / "source.json"), X_s)
        np.testing.assert_array_equal(features(tmp_path / "target.json"), X_t)

    def test_regeneration_byte_identical(self, data, tmp_path):
        main(["synth", "--out", str(tmp_path), *SYNTH])
        for name in ("source.csv", "target.csv", "source.json", "target.json"):
            assert (tmp_path / name).read_bytes() == (data / name).read_bytes()

    def test_bad_concept_count(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path), "--z-source", "0"]) == 1


class TestRun:
    def test_outputs(self, data, tmp_path):
        assert run(data, tmp_path / "r") == 0
        for name in ("config.json", "metrics.csv", "timings.csv", "checkpoint.bin",
                     "summary.txt", "source.manifest.json", "target.manifest.json"):
            assert (tmp_path / "r" / name).is_file()
        summary = (tmp_path / "r" / "summary.txt").read_text()
        assert "final target acc" in summary and "final widths" in summary
        _, state, _ = read_checkpoint(tmp_path / "r" / "checkpoint.bin")
        assert state.throughput.remaining == 0

    def test_deterministic(self, data, tmp_path):
        run(data, tmp_path / "a")
        run(data, tmp_path / "b")
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == \
               (tmp_path / "b" / "metrics.csv").read_bytes()

    def test_epochs_keep_window_count(self, data, tmp_path):
        run(data, tmp_path / "k1")
        run(data, tmp_path / "k3", "--epochs", "3")
        assert len(read_metrics(tmp_path / "k1" / "metrics.csv")) == \
               len(read_metrics(tmp_path / "k3" / "metrics.csv")) == 9

    def test_flags_in_summary(self, data, tmp_path):
        run(data, tmp_path / "r", "--no-daa", "--single-node-dae")
        summary = (tmp_path / "r" / "summary.txt").read_text()
        assert "daa_enabled=False" in summary and "dae_starts_single_node=True" in summary

    def test_resume_matches(self, data, tmp_path):
        run(data, tmp_path / "full")
        run(data, tmp_path / "part", "--max-windows", "4")
        assert run(data, tmp_path / "part", "--resume",
                   str(tmp_path / "part" / "checkpoint.bin")) == 0
        assert (tmp_path / "full" / "metrics.csv").read_bytes() == \
               (tmp_path / "part" / "metrics.csv").read_bytes()

    def test_bad_window_is_usage_error(self, data, tmp_path):
        assert run(data, tmp_path / "r", "--window", "1") == 1

    def test_missing_manifest_is_runtime_error(self, tmp_path):
        rc = main(["run", "--source", str(tmp_path / "x.json"), "--target",
                   str(tmp_path / "y.json"), "--out", str(tmp_path / "o")])
        assert rc == 2

    def test_unknown_flag(self):
        with pytest.raises(SystemExit) as info:
            main(["run", "--bogus"])
        assert info.value.code == 1


class TestConfig:
    def test_precedence(self, tmp_path):
        path = tmp_path / "c.ini"
        path.write_text("# comment\nwindow = 200\nlr = 0.05\ndaa = no\n"
                        "source = s.json\ntarget = t.json\n")
        cfg = resolve_config(read_config_file(path), {"window": 300, "lr": None})
        assert (cfg.window, cfg.lr, cfg.daa, cfg.epochs) == (300, 0.05, False, 1)

    def test_defaults(self):
        cfg = resolve_config({}, {"source": "s", "target": "t"})
        assert (cfg.window, cfg.epochs, cfg.lr, cfg.momentum, cfg.alpha1, cfg.alpha2,
                cfg.noise) == (1000, 1, 0.01, 0.95, 1.25, 0.75, 0.10)

    @pytest.mark.parametrize("values", [{"windw": "3"}, {"window": "ten"}, {"epochs": 0},
                                        {"daa": "maybe"}, {"momentum": 1.0}])
    def test_rejects(self, values):
        with pytest.raises(UsageError):
            resolve_config({"source": "s", "target": "t"}, values)

    def test_file_run(self, data, tmp_path):
        cfg = tmp_path / "c.ini"
        cfg.write_text(f"source = {data / 'source.json'}\ntarget = {data / 'target.json'}\n"
                       f"out = {tmp_path / 'o'}\nwindow = 100\n")
        assert main(["run", "--config", str(cfg)]) == 0
        saved = json.loads((tmp_path / "o" / "config.json").read_text())
        assert saved["window"] == 100
        assert RunConfig(**saved).window == 100


class TestReport:
    def test_mean_std_per_experiment(self, data, tmp_path, capsys):
        dirs = []
        for seed in range(3):
            d = tmp_path / f"s{seed}"
            run(data, d, "--model-seed", str(seed), "--name", "full")
            dirs.append(d)
        run(data, tmp_path / "abl", "--no-daa", "--name", "ablation")
        rows = aggregate([str(d) for d in dirs] + [str(tmp_path / "abl")])
        assert [(r["experiment"], r["runs"]) for r in rows] == [("full", 3), ("ablation", 1)]
        finals = [read_metrics(d / "metrics.csv").rows[-1].target_acc_cum for d in dirs]
        assert rows[0]["acc_mean"] == pytest.approx(np.mean(finals))
        assert rows[0]["acc_std"] == pytest.approx(np.std(finals))
        capsys.readouterr()
        assert main(["report", *map(str, dirs)]) == 0
        assert "full" in capsys.readouterr().out

    def test_no_input(self, capsys):
        assert main(["report"]) == 1
        assert "no input" in capsys.readouterr().err


class TestGradcheck:
    def test_exit_zero(self, capsys):
        assert main(["gradcheck"]) == 0
        out = capsys.readouterr().out
        assert out.count("PASS") == 5 and "FAIL" not in out

    def test_failure_exit_code(self, monkeypatch):
        bad = lambda seed: [cli.checks.CheckResult("x", False, "forced")]
        monkeypatch.setattr(cli.checks, "SUITES", {"x": bad})
        assert main(["gradcheck"]) == 3


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "acdc", "report"], capture_output=True, text=True)
    assert out.returncode == 1
