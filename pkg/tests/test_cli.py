import json
import shutil
import subprocess
import sys

import pytest

from rnnfv.cli import main


def call(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out
    return code, json.loads(out) if code == 0 else out


@pytest.fixture
def order_dir(tmp_path, capsys):
    code, _ = call(capsys, "gen-order-task", "--n-train", 40, "--n-test", 10, "--dim", 3, "--length", 4,
                   "--seed", 1, "--out-dir", tmp_path)
    assert code == 0
    return tmp_path


def test_classification_chain(order_dir, capsys):
    d = order_dir
    code, rep = call(capsys, "train-rnn", "--train", d / "train.jsonl", "--fc1-units", 4, "--lstm-units", 4,
                     "--epochs", 2, "--seed", 0, "--out-dir", d)
    assert code == 0 and len(rep["loss_curve"]) == 2
    assert (d / "rnn_epoch0002.npz").exists() and (d / "loss_curve.csv").exists()
    for split in ("train", "test"):
        code, rep = call(capsys, "extract-fv", "--model", d / "rnn_final.npz", "--input", d / f"{split}.jsonl",
                         "--out", d / f"{split}_fv.jsonl", "--normalize")
        assert code == 0 and rep["raw_dim"] == 3 * 5
    code, rep = call(capsys, "pool", "--input", d / "train.jsonl", "--method", "mean", "--out", d / "train_mean.jsonl")
    assert code == 0
    code, rep = call(capsys, "pool", "--input", d / "test.jsonl", "--method", "mean", "--out", d / "test_mean.jsonl")
    code, rep = call(capsys, "train-svm", "--train", d / "train_fv.jsonl", "--train", d / "train_mean.jsonl",
                     "--seed", 0, "--epochs", 5, "--out", d / "svm.npz")
    assert code == 0 and rep["classes"] == [0, 1]
    code, rep = call(capsys, "classify", "--model", d / "svm.npz", "--input", d / "test_fv.jsonl",
                     "--input", d / "test_mean.jsonl")
    assert code == 0 and 0 <= rep["accuracy"] <= 1


def test_gmm_and_pca(order_dir, capsys):
    d = order_dir
    code, rep = call(capsys, "fit-gmm", "--input", d / "train.jsonl", "--k", 2, "--seed", 0, "--out", d / "g.npz")
    assert code == 0 and rep["k"] == 2
    code, rep = call(capsys, "pool", "--input", d / "test.jsonl", "--method", "gmm-fv", "--gmm", d / "g.npz",
                     "--out", d / "t.jsonl")
    assert code == 0 and rep["dim"] == 2 * 2 * 3
    code, rep = call(capsys, "pca", "--input", d / "train.jsonl", "--dim", 2, "--out", d / "p.npz",
                     "--transform-out", d / "tp.jsonl")
    assert code == 0 and rep["output_dim"] == 2


def test_retrieval_chain(tmp_path, capsys):
    d = tmp_path
    code, _ = call(capsys, "gen-retrieval-task", "--n-train", 80, "--n-valid", 10, "--n-test", 20, "--dx", 5,
                   "--dy", 5, "--latent-dim", 3, "--per-image", 2, "--seed", 0, "--out-dir", d)
    assert code == 0
    for split in ("train", "test"):
        call(capsys, "pool", "--input", d / f"{split}_y.jsonl", "--method", "mean", "--out", d / f"{split}_ym.jsonl")
    code, rep = call(capsys, "fit-cca", "--x", d / "train_x.jsonl", "--y", d / "train_ym.jsonl", "--dim", 3,
                     "--lambda", 1e-3, "--out", d / "c.npz")
    assert code == 0 and len(rep["correlations"]) == 3
    code, rep = call(capsys, "retrieve", "--cca", d / "c.npz", "--x", d / "test_x.jsonl", "--y", d / "test_ym.jsonl",
                     "--cca", d / "c.npz", "--x", d / "test_x.jsonl", "--y", d / "test_ym.jsonl")
    assert code == 0 and rep["fused_models"] == 2 and rep["search"]["recall"]["10"] > 0.5


def test_run_is_byte_identical(order_dir, capsys):
    cfg = {"seed": 5, "pooling": "rnn-fv", "data": {"train": "train.jsonl", "test": "test.jsonl"},
           "rnn": {"fc1_units": 4, "lstm_units": 4}, "train": {"epochs": 2}, "svm": {"epochs": 5}}
    (order_dir / "cfg.json").write_text(json.dumps(cfg))
    outs = []
    for _ in range(2):
        assert main(["run", "--config", str(order_dir / "cfg.json")]) == 0
        outs.append(capsys.readouterr().out)
    assert outs[0] == outs[1]
    assert json.loads(outs[0])["chosen_epoch"] in (1, 2)


@pytest.mark.filterwarnings("ignore:SQFV1")
def test_convert(order_dir, capsys):
    code, _ = call(capsys, "convert", "--input", order_dir / "test.jsonl", "--output", order_dir / "t.sqfv")
    assert code == 0 and (order_dir / "t.sqfv").read_bytes().startswith(b"SQFV1")


class TestExitCodes:
    def test_missing_seed_is_usage_error(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["gen-order-task", "--out-dir", str(tmp_path)])
        assert exc.value.code == 2

    def test_config_error(self, tmp_path, capsys):
        (tmp_path / "c.json").write_text(json.dumps({"task": "classify"}))
        assert main(["run", "--config", str(tmp_path / "c.json")]) == 2

    def test_data_error(self, tmp_path, capsys):
        assert main(["convert", "--input", str(tmp_path / "missing.jsonl"), "--output", str(tmp_path / "o")]) == 3
        assert "error:" in capsys.readouterr().err

    def test_type_mismatch(self, order_dir, capsys):
        call(capsys, "fit-gmm", "--input", order_dir / "train.jsonl", "--k", 1, "--seed", 0, "--out", order_dir / "g.npz")
        code, _ = call(capsys, "classify", "--model", order_dir / "g.npz", "--input", order_dir / "test.jsonl")
        assert code == 3

    def test_divergence(self, tmp_path, capsys):
        (tmp_path / "d.jsonl").write_text(
            json.dumps({"format": "rnnfv-sequences", "version": 1, "kind": "vectors", "dim": 1, "count": 1}) + "\n"
            + json.dumps({"id": "x", "vectors": [[1.0], [-1.0], [2.0]]}) + "\n")
        code, _ = call(capsys, "train-rnn", "--train", tmp_path / "d.jsonl", "--lstm-units", 2, "--epochs", 1,
                       "--learning-rate", 1e300, "--seed", 0, "--out-dir", tmp_path)
        assert code == 4


@pytest.mark.skipif(shutil.which("rnnfv") is None, reason="console script not installed")
def test_console_script(tmp_path):
    proc = subprocess.run(["rnnfv", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "rnnfv" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "rnnfv.cli", "convert", "--input", str(tmp_path / "x"),
                           "--output", str(tmp_path / "y")], capture_output=True, text=True)
    assert proc.returncode == 3
