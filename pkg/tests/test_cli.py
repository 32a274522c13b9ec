import json
import os

import numpy as np
import pytest
from PIL import Image

import synthetic
from crossgen.cli import ConfigError, main, read_config_file, resolve_options
from crossgen.pipeline import reproduce_stages


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    return {
        "mnist": synthetic.write_mnist(root / "mnist", n_train=40, n_test=20),
        "fsdd": synthetic.write_fsdd(root / "fsdd"),
        "scd": synthetic.write_scd(root / "scd", per_word=30),
    }


@pytest.fixture(scope="module")
def prepared(small, tmp_path_factory):
    out = tmp_path_factory.mktemp("prepared")
    code = main(["prepare", "--mnist", str(small["mnist"]), "--fsdd", str(small["fsdd"]), "--scd",
                 str(small["scd"]), "--out", str(out), "--seed", "1", "--stratified", "--log-level", "WARNING"])
    assert code == 0
    return out


def error_of(capsys):
    line = [ln for ln in capsys.readouterr().err.splitlines() if ln.startswith("error: ")][-1]
    return json.loads(line[len("error: "):])


def only_run(parent):
    runs = [p for p in parent.iterdir() if p.is_dir()]
    assert len(runs) == 1
    return runs[0]


class TestConfig:
    def test_precedence(self, tmp_path):
        cfg = tmp_path / "c.txt"
        cfg.write_text("# comment\nepochs = 5\nbatch-size = 16  # trailing\nalpha = 0.2, 2\n")
        assert resolve_options("train", {"config": cfg, "out": tmp_path})["epochs"] == 5
        o = resolve_options("train", {"config": cfg, "out": tmp_path, "epochs": 2})
        assert (o["epochs"], o["batch_size"], o["alpha"]) == (2, 16, [0.2, 2.0])
        assert resolve_options("train", {"out": tmp_path})["epochs"] == 100

    def test_unknown_key(self, tmp_path, capsys):
        cfg = tmp_path / "c.txt"
        cfg.write_text("epochs = 1\nlearning_rate = 3\n")
        assert main(["train", "aivae", "--config", str(cfg), "--out", str(tmp_path)]) == 1
        err = error_of(capsys)
        assert err["type"] == "ConfigError" and "learning_rate" in err["message"]

    def test_malformed_line(self, tmp_path):
        cfg = tmp_path / "c.txt"
        cfg.write_text("epochs 3\n")
        with pytest.raises(ConfigError, match=":1:"):
            read_config_file(cfg)

    def test_seed_env_fallback(self, tmp_path, monkeypatch):
        monkeypatch.setenv("CROSSGEN_SEED", "41")
        assert resolve_options("eval", {"model": 1, "data": 1, "classifier": 1, "out": tmp_path})["seed"] == 41
        assert resolve_options("eval", {"model": 1, "data": 1, "classifier": 1, "out": tmp_path, "seed": 2})["seed"] == 2
        monkeypatch.delenv("CROSSGEN_SEED")
        assert resolve_options("eval", {"model": 1, "data": 1, "classifier": 1, "out": tmp_path})["seed"] == 0

    def test_required(self, capsys):
        assert main(["eval", "--data", "x"]) == 1
        assert "--model" in error_of(capsys)["message"]


class TestPrepare:
    def test_manifest(self, prepared):
        manifest = json.loads((prepared / "manifest.json").read_text())
        assert set(manifest["files"]) == {"mnist-fsdd.train", "mnist-fsdd.test", "mnist-scd.train", "mnist-scd.test"}
        assert manifest["counts"]["mnist-fsdd.train"] == 40 and manifest["counts"]["fsdd_clips"] == 60
        assert (prepared / "config.txt").read_text().startswith("# crossgen ")

    def test_rerun_identical(self, small, prepared, tmp_path):
        args = ["prepare", "--mnist", str(small["mnist"]), "--fsdd", str(small["fsdd"]), "--scd", str(small["scd"]),
                "--out", str(tmp_path), "--seed", "1", "--stratified"]
        assert main(args) == 0
        a = json.loads((prepared / "manifest.json").read_text())["files"]
        b = json.loads((tmp_path / "manifest.json").read_text())["files"]
        assert a == b

    def test_only_fsdd(self, small, tmp_path):
        assert main(["prepare", "--mnist", str(small["mnist"]), "--fsdd", str(small["fsdd"]), "--only", "fsdd", "--stratified",
                     "--out", str(tmp_path)]) == 0
        assert sorted(p.name for p in tmp_path.glob("*.aipx")) == ["mnist-fsdd.test.aipx", "mnist-fsdd.train.aipx"]

    def test_missing_corpus(self, small, tmp_path, capsys):
        missing = tmp_path / "nowhere"
        assert main(["prepare", "--mnist", str(small["mnist"]), "--fsdd", str(missing), "--out", str(tmp_path)]) == 1
        assert str(missing) in error_of(capsys)["message"]


class TestTrainEval:
    def test_aivae_smoke(self, prepared, tmp_path):
        assert main(["train", "aivae", "--data", str(prepared / "mnist-fsdd.train.aipx"), "--epochs", "1",
                     "--batch-size", "20", "--out", str(tmp_path), "--seed", "5"]) == 0
        run = only_run(tmp_path)
        assert run.name.endswith("-seed5-aivae")
        assert {p.name for p in run.iterdir()} == {"checkpoint.aick", "train_log.tsv", "config.txt", "grid.png"}
        snapshot = read_config_file(run / "config.txt")
        assert snapshot["epochs"] == "1" and snapshot["arch"] == "aivae"

    def test_aivaegan_alpha_sweep(self, prepared, tmp_path):
        assert main(["train", "aivaegan", "--data", str(prepared / "mnist-fsdd.train.aipx"), "--alpha", "0.2", "2",
                     "--epochs", "1", "--batch-size", "20", "--out", str(tmp_path)]) == 0
        runs = sorted(p.name.split("-")[-1] for p in tmp_path.iterdir())
        assert runs == ["a0.2", "a2"]
        assert all((p / "checkpoint.aick").exists() for p in tmp_path.iterdir())

    def test_eval_deterministic_with_sweep(self, prepared, tmp_path):
        assert main(["train", "lenet5", "--mnist", str(json.loads((prepared / "manifest.json").read_text())
                                                      ["sources"]["mnist"]),
                     "--epochs", "1", "--out", str(tmp_path / "clf")]) == 0
        assert main(["train", "aivae", "--data", str(prepared / "mnist-fsdd.train.aipx"), "--epochs", "1",
                     "--batch-size", "20", "--out", str(tmp_path / "gen")]) == 0
        clf = only_run(tmp_path / "clf") / "checkpoint.aick"
        gen = only_run(tmp_path / "gen") / "checkpoint.aick"
        args = ["eval", "--model", str(gen), "--data", str(prepared / "mnist-fsdd.test.aipx"),
                "--classifier", str(clf), "--seed", "3", "--mask-sweep"]
        assert main(args + ["--out", str(tmp_path / "e1")]) == 0
        assert main(args + ["--out", str(tmp_path / "e2")]) == 0
        r1, r2 = only_run(tmp_path / "e1"), only_run(tmp_path / "e2")
        assert (r1 / "report.txt").read_bytes() == (r2 / "report.txt").read_bytes()
        sweep = (r1 / "sweep.tsv").read_text().splitlines()
        assert len(sweep) == 66 and sweep[1].startswith("0\t")
        with Image.open(r1 / "grid.png") as img:
            assert img.mode == "L"

    def test_architecture_mismatch(self, prepared, tmp_path, capsys):
        assert main(["train", "lenet5", "--mnist", str(json.loads((prepared / "manifest.json").read_text())
                                                      ["sources"]["mnist"]),
                     "--epochs", "1", "--out", str(tmp_path)]) == 0
        clf = only_run(tmp_path) / "checkpoint.aick"
        assert main(["eval", "--model", str(clf), "--data", str(prepared / "mnist-fsdd.test.aipx"),
                     "--classifier", str(clf), "--out", str(tmp_path / "e")]) == 1
        assert "aivae" in error_of(capsys)["message"]


def test_reproduce_failure_then_resume(prepared, tmp_path, capsys):
    data = tmp_path / "data"
    data.mkdir()
    for p in prepared.iterdir():
        if p.name != "mnist-scd.test.aipx":
            (data / p.name).write_bytes(p.read_bytes())
    out = tmp_path / "repro"
    args = ["reproduce", "--data", str(data), "--out", str(out), "--epochs", "1", "--batch-size", "20",
            "--log-level", "WARNING"]
    assert main(args) == 1
    err = error_of(capsys)
    assert err["stage"] == "aivae-mnist-scd" and "mnist-scd.test" in err["message"]
    state = json.loads((out / "state.json").read_text())
    assert state["failed"] == "aivae-mnist-scd"
    assert set(state["completed"]) == {"lenet5", "aivae-mnist-fsdd"}
    lenet_mtime = os.stat(out / "lenet5" / "checkpoint.aick").st_mtime_ns

    (data / "mnist-scd.test.aipx").write_bytes((prepared / "mnist-scd.test.aipx").read_bytes())
    assert main(args + ["--resume"]) == 0
    assert os.stat(out / "lenet5" / "checkpoint.aick").st_mtime_ns == lenet_mtime
    state = json.loads((out / "state.json").read_text())
    assert set(state["completed"]) == set(reproduce_stages()) and len(reproduce_stages()) == 11
    summary = json.loads((out / "summary.json").read_text())
    assert summary["reference"]["aivae"]["mnist-fsdd"] == 0.942
    checks = {v["check"]: v for v in summary["verdicts"]}
    assert checks["mnist-fsdd sweep k=0 equals unmasked"]["passed"]
    text = (out / "summary.txt").read_text()
    assert "aivaegan mnist-scd alpha=2" in text and ("PASS" in text or "FAIL" in text)
    sweep = summary["results"]["aivae"]["mnist-scd"]["sweep"]
    assert sweep["k"] == list(range(65)) and np.all(np.isfinite(sweep["accuracy"]))
