import csv
import json
import math

import numpy as np
import pytest

from nkf_aec.cli import (
    EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_OK, load_settings, main, parse_config_file,
)
from nkf_aec.errors import ConfigError
from nkf_aec.nkf import ModelWeights, NkfConfig
from nkf_aec.sim import read_manifest
from nkf_aec.wavio import read_wav, write_wav
from nkf_aec.weights_io import save_weights, verify_manifest


@pytest.fixture(scope="module")
def scenes(tmp_path_factory):
    out = tmp_path_factory.mktemp("scenes")
    assert main(["simulate", "--out", str(out), "--count", "2", "--seed", "4",
                 "--duration", "5"]) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def weights_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("w") / "w.nkfw"
    save_weights(path, ModelWeights.glorot(NkfConfig(), 0))
    return path


def read_csv(path):
    with open(path) as f:
        return list(csv.DictReader(f))


class TestSimulate:
    def test_manifest(self, scenes):
        rows = read_manifest(scenes / "manifest.jsonl")
        assert len(rows) == 8
        assert sorted({r.subset for r in rows}) == ["DT", "DT-EPC", "FST", "FST-EPC"]
        for r in rows:
            if r.subset.endswith("EPC"):
                assert 3.5 <= r.config.switch_time <= 4.5
            for name in ("far", "near", "echo", "mic"):
                assert len(read_wav(scenes / r.paths[name])) == 80000

    def test_byte_identical(self, scenes, tmp_path):
        assert main(["simulate", "--out", str(tmp_path), "--count", "2", "--seed", "4",
                     "--duration", "5"]) == EXIT_OK
        for path in scenes.iterdir():
            assert (tmp_path / path.name).read_bytes() == path.read_bytes()

    def test_subset_selection_is_stable(self, scenes, tmp_path):
        main(["simulate", "--out", str(tmp_path), "--count", "2", "--seed", "4", "--duration", "5",
              "--subset", "DT-EPC"])
        assert ((tmp_path / "dt-epc-001_mic.wav").read_bytes()
                == (scenes / "dt-epc-001_mic.wav").read_bytes())


class TestRun:
    def test_tfdkf_with_metrics(self, scenes, tmp_path):
        metrics = tmp_path / "m.csv"
        code = main(["run", "--method", "tfdkf", "--manifest", str(scenes / "manifest.jsonl"),
                     "--clip", "dt-000", "--out", str(tmp_path / "est.wav"),
                     "--metrics", str(metrics)])
        assert code == EXIT_OK
        rows = read_csv(metrics)
        assert rows[0]["clip_id"] == "dt-000" and rows[0]["method"] == "tfdkf"
        assert float(rows[0]["erle_db"]) > 5
        assert rows[0]["sdr_db"] != ""

    @pytest.mark.parametrize("method", ["tfdkf", "nkf", "pnlms"])
    def test_silent_far_end(self, tmp_path, weights_file, method):
        rng = np.random.default_rng(0)
        mic = 0.1 * rng.standard_normal(16000)
        write_wav(tmp_path / "far.wav", np.zeros(16000), fmt="float32")
        write_wav(tmp_path / "mic.wav", mic, fmt="float32")
        cfg = tmp_path / "c.txt"
        cfg.write_text("pnlms.filter_len = 64\n")
        args = ["--config", str(cfg), "run", "--method", method, "--far", str(tmp_path / "far.wav"),
                "--mic", str(tmp_path / "mic.wav"), "--echo", str(tmp_path / "mic.wav"),
                "--out", str(tmp_path / "est.wav"), "--metrics", str(tmp_path / "m.csv")]
        if method == "nkf":
            args += ["--weights", str(weights_file)]
        assert main(args) == EXIT_OK
        est = read_wav(tmp_path / "est.wav")
        mic32 = read_wav(tmp_path / "mic.wav")
        np.testing.assert_allclose(est, mic32, atol=1e-7)
        assert abs(float(read_csv(tmp_path / "m.csv")[0]["erle_db"])) < 1e-6

    def test_nkf_needs_weights(self, scenes, tmp_path):
        code = main(["run", "--method", "nkf", "--manifest", str(scenes / "manifest.jsonl"),
                     "--clip", "fst-000", "--out", str(tmp_path / "e.wav")])
        assert code == EXIT_CONFIG

    def test_missing_input(self, tmp_path):
        code = main(["run", "--method", "tfdkf", "--far", str(tmp_path / "nope.wav"),
                     "--mic", str(tmp_path / "nope.wav"), "--out", str(tmp_path / "e.wav")])
        assert code == EXIT_IO

    def test_divergence_is_numeric_error(self, scenes, tmp_path):
        w = ModelWeights.glorot(NkfConfig(), 0)
        w["fc3.b"] = np.full(4, 1e30 + 0j)
        save_weights(tmp_path / "bad.nkfw", w)
        with np.errstate(all="ignore"):
            code = main(["run", "--method", "nkf", "--weights", str(tmp_path / "bad.nkfw"),
                         "--manifest", str(scenes / "manifest.jsonl"), "--clip", "fst-000",
                         "--out", str(tmp_path / "e.wav")])
        assert code == EXIT_NUMERIC

    def test_bad_flag_is_config_error(self):
        with pytest.raises(SystemExit) as info:
            main(["run", "--method", "lms", "--out", "x.wav"])
        assert info.value.code == EXIT_CONFIG


class TestSettings:
    def test_file_and_env(self, tmp_path):
        cfg = tmp_path / "c.txt"
        cfg.write_text("# comment\ntfdkf.transition = 0.99\ntrain.lr = 0.002  # inline\n"
                       "train.bins_per_clip = 16\ntrain.level_range = -3,3\n")
        s = load_settings(cfg, environ={"NKF_AEC_TFDKF_TRANSITION": "0.95"})
        assert s["tfdkf"]["transition"] == 0.95
        assert s["train"]["lr"] == 0.002
        assert s["train"]["bins_per_clip"] == 16
        assert s["train"]["level_range"] == (-3.0, 3.0)

    def test_unknown_key(self, tmp_path):
        cfg = tmp_path / "c.txt"
        cfg.write_text("tfdkf.speed = 3\n")
        with pytest.raises(ConfigError):
            load_settings(cfg, environ={})
        assert main(["--config", str(cfg), "simulate", "--out", str(tmp_path / "o")]) == EXIT_CONFIG

    def test_malformed_line(self, tmp_path):
        cfg = tmp_path / "c.txt"
        cfg.write_text("just words\n")
        with pytest.raises(ConfigError):
            parse_config_file(cfg)

    def test_invalid_value_is_config_error(self, tmp_path, scenes):
        cfg = tmp_path / "c.txt"
        cfg.write_text("tfdkf.transition = 2.0\n")
        code = main(["--config", str(cfg), "run", "--method", "tfdkf",
                     "--manifest", str(scenes / "manifest.jsonl"), "--clip", "fst-000",
                     "--out", str(tmp_path / "e.wav")])
        assert code == EXIT_CONFIG


class TestTrainCommand:
    def test_zero_lr_smoke(self, tmp_path, weights_file):
        cfg = tmp_path / "c.txt"
        cfg.write_text("train.bins_per_clip = 4\n")
        code = main(["--config", str(cfg), "train", "--out", str(tmp_path / "run"), "--epochs", "1",
                     "--clips", "4", "--batch-size", "2", "--lr", "0", "--weights",
                     str(weights_file)])
        assert code == EXIT_OK
        out = tmp_path / "run" / "weights.nkfw"
        assert out.read_bytes() == weights_file.read_bytes()
        assert verify_manifest(out)
        rows = read_csv(tmp_path / "run" / "loss.csv")
        assert len(rows) == 1 and rows[0]["epoch"] == "1"


class TestEvaluate:
    def test_single_clip(self, scenes, tmp_path):
        one = tmp_path / "one"
        one.mkdir()
        line = (scenes / "manifest.jsonl").read_text().splitlines()[0]
        rec = json.loads(line)
        rec["paths"] = {k: str(scenes / v) for k, v in rec["paths"].items()}
        (one / "manifest.jsonl").write_text(json.dumps(rec) + "\n")
        code = main(["evaluate", "--manifest", str(one / "manifest.jsonl"), "--method", "tfdkf",
                     "--out", str(tmp_path / "rep"), "--curve-subset", rec["subset"]])
        assert code == EXIT_OK
        rows = read_csv(tmp_path / "rep" / "metrics.csv")
        summary = read_csv(tmp_path / "rep" / "summary.csv")
        assert len(rows) == 1 and len(summary) == 1
        assert float(summary[0]["erle_db"]) == float(rows[0]["erle_db"])
        curve = read_csv(tmp_path / "rep" / "erle_curve.csv")
        assert len(curve) == math.ceil(80000 / 256)

    def test_subset_means_and_threads(self, scenes, tmp_path, weights_file):
        args = ["evaluate", "--manifest", str(scenes / "manifest.jsonl"), "--method", "tfdkf",
                "--method", "nkf", "--weights", str(weights_file)]
        assert main(args + ["--out", str(tmp_path / "a")]) == EXIT_OK
        assert main(["--threads", "3"] + args + ["--out", str(tmp_path / "b")]) == EXIT_OK
        for name in ("metrics.csv", "summary.csv", "convergence.csv", "erle_curve.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        rows = read_csv(tmp_path / "a" / "metrics.csv")
        for s in read_csv(tmp_path / "a" / "summary.csv"):
            sel = [float(r["erle_db"]) for r in rows
                   if r["method"] == s["method"] and r["clip_id"].rsplit("-", 1)[0] == s["subset"].lower()]
            assert len(sel) == int(s["clips"]) == 2
            assert abs(float(s["erle_db"]) - sum(sel) / len(sel)) < 1e-5
        conv = read_csv(tmp_path / "a" / "convergence.csv")
        epc = [r for r in conv if "epc" in r["clip_id"]]
        assert epc and all(r["recover_frames"] != "" for r in epc)

    def test_failures_reported_and_run_continues(self, scenes, tmp_path):
        w = ModelWeights.glorot(NkfConfig(), 0)
        w["fc3.b"] = np.full(4, 1e30 + 0j)
        save_weights(tmp_path / "bad.nkfw", w)
        with np.errstate(all="ignore"):
            code = main(["evaluate", "--manifest", str(scenes / "manifest.jsonl"), "--subset", "FST",
                         "--method", "tfdkf", "--method", "nkf", "--weights",
                         str(tmp_path / "bad.nkfw"), "--out", str(tmp_path / "rep")])
        assert code == EXIT_OK
        assert len(read_csv(tmp_path / "rep" / "metrics.csv")) == 2
        fails = read_csv(tmp_path / "rep" / "failures.csv")
        assert len(fails) == 2 and all(f["method"] == "nkf" for f in fails)
