import csv

import pytest

from ivafuse import formats
from ivafuse.cli import main


def _kv(text):
    return dict(line.split("=", 1) for line in text.splitlines() if "=" in line and not line.startswith("#"))


def test_no_command_is_usage_error(capsys):
    assert main([]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_flag_is_usage_error(capsys):
    assert main(["train", "--cache", "x", "--bogus"]) == 1


def test_gradcheck_iva(capsys):
    assert main(["gradcheck", "--target", "iva", "--instances", "5"]) == 0
    out = _kv(capsys.readouterr().out)
    assert float(out["max_rel_error"]) < 1e-5


def test_train_rejects_kernel_too_large_before_loading(capsys, tmp_path):
    assert main(["train", "--cache", str(tmp_path / "missing"), "--n1", "35"]) == 1
    assert "N - n1 - n2 - n3 + 3" in capsys.readouterr().err


def test_unknown_config_key_is_usage_error(capsys, tmp_path):
    (tmp_path / "c.cfg").write_text("nonsense=1\n")
    assert main(["isi-bench", "--trials", "1", "--config", str(tmp_path / "c.cfg")]) == 1
    assert "unknown" in capsys.readouterr().err


def test_missing_input_is_runtime_error(capsys, tmp_path):
    assert main(["iva", "--input", str(tmp_path / "none.bin")]) == 2
    assert "error" in capsys.readouterr().err


def test_synth_mixture_then_iva_trace(capsys, tmp_path):
    assert main(["synth", "mixture", "--out", str(tmp_path), "-N", "3", "-T", "500", "--seed", "2"]) == 0
    assert formats.read_tensor(tmp_path / "x.bin").shape == (2, 3, 500)
    assert main(["iva", "--input", str(tmp_path / "x.bin"), "--out", str(tmp_path / "w.bin"),
                 "--trace", str(tmp_path / "trace.csv")]) == 0
    captured = capsys.readouterr()
    assert "# iva.max_iters=" in captured.err
    rows = list(csv.reader(open(tmp_path / "trace.csv")))
    assert rows[0] == ["iter", "eta", "cost"]
    costs = [float(r[2]) for r in rows[1:]]
    assert all(b <= a + 1e-9 for a, b in zip(costs, costs[1:]))
    assert formats.read_demixing(tmp_path / "w.bin").shape == (2, 3, 3)


def test_isi_bench_writes_csv(capsys, tmp_path):
    assert main(["isi-bench", "--trials", "2", "--out", str(tmp_path / "isi.csv")]) == 0
    out = _kv(capsys.readouterr().out)
    assert out["trials"] == "2" and int(out["passed"]) == 2
    assert (tmp_path / "isi.csv").read_text().startswith("seed,iters,final_cost,joint_isi\n")


def test_end_to_end_pipeline(capsys, tmp_path):
    assert main(["synth", "speakers", "--out", str(tmp_path / "wav"), "--speakers", "2", "--sentences", "3",
                 "--test", "1", "--seed", "4"]) == 0
    manifest = _kv(capsys.readouterr().out)["manifest"]
    assert main(["extract", "--manifest", manifest, "--out", str(tmp_path / "cache"), "--max-iters", "5",
                 "--workers", "1"]) == 0
    assert _kv(capsys.readouterr().out)["sentences"] == "6"
    ckpt = tmp_path / "model.bin"
    assert main(["train", "--cache", str(tmp_path / "cache"), "--variant", "ncnn", "--feature-mode", "X_tensor",
                 "--c1", "4", "--f1", "8", "--f2", "8", "--epochs", "2", "--batch-size", "2",
                 "--metrics", str(tmp_path / "m.csv"), "--checkpoint", str(ckpt)]) == 0
    assert ckpt.exists()
    assert len((tmp_path / "m.csv").read_text().splitlines()) == 3
    capsys.readouterr()
    assert main(["eval", "--cache", str(tmp_path / "cache"), "--checkpoint", str(ckpt)]) == 0
    acc = float(_kv(capsys.readouterr().out)["acc"])
    assert acc in (0.0, 50.0, 100.0)


def test_incompatible_mode_is_usage_error(tmp_path):
    assert main(["train", "--cache", str(tmp_path), "--variant", "ncnn", "--feature-mode", "Y_pair"]) == 1


@pytest.mark.parametrize("argv", [["synth"], ["gradcheck"], ["eval", "--cache", "x"]])
def test_missing_required_arguments(argv):
    assert main(argv) == 1
