import csv
import json

import numpy as np
import pytest

from mmrb.cli import RunRecord, fmt, main, metrics_header, parse_config_text, UsageError
from mmrb.model import Model, build_lenet, save_checkpoint

HEADER = ("run_id,phase,epoch,attack,epsilon,overall,o0,o1,o2,o3,o4,o5,o6,o7,o8,o9,ce,cost,fuzziness")


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _train(data_dir, run_dir, *extra):
    argv = ["train", "--data-dir", str(data_dir), "--epochs", "2", "--batch-size", "16", "--run-dir", str(run_dir),
            "--seed", "7", *extra]
    assert main(argv) == 0
    return run_dir


@pytest.fixture
def trained(fake_mnist, tmp_path):
    return _train(fake_mnist, tmp_path / "run", "--regime", "cse", "--protect", "0", "--cost", "10", "--gamma", "1.0")


def test_metrics_header_is_exact():
    assert ",".join(metrics_header()) == HEADER


def test_float_format():
    assert fmt(0.123456789) == "0.123457" and fmt(None) == "" and fmt(float("nan")) == "" and fmt(3) == "3"


def test_train_writes_record_and_trace(trained, fake_mnist):
    rec = RunRecord.read(trained)
    assert rec.command == "train" and rec.tool_version
    assert (trained / rec.checkpoint).is_file()
    assert rec.initial_conv_fuzziness == pytest.approx(0.693, abs=0.01)
    text = (trained / rec.trace).read_text()
    assert text.splitlines()[0] == HEADER
    rows = _rows(trained / rec.trace)
    assert [r["epoch"] for r in rows] == ["1", "2"] and {r["phase"] for r in rows} == {"train"}
    assert all(r["attack"] == "" and r["epsilon"] == "" for r in rows)
    assert rec.config["regime"] == "cse" and rec.config["gamma"] == 1.0


def test_config_replay_is_byte_identical(trained, tmp_path):
    again = tmp_path / "again"
    assert main(["train", "--config", str(trained / "config.txt"), "--run-dir", str(again)]) == 0
    assert (again / "model.ckpt").read_bytes() == (trained / "model.ckpt").read_bytes()
    assert RunRecord.read(again).source_config == (trained / "config.txt").read_text()


def test_flags_override_config(fake_mnist, tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text(f"data-dir = {fake_mnist}\nepochs = 3\nbatch-size = 32\n# comment\nlr = 0.02\n")
    run = tmp_path / "r"
    assert main(["train", "--config", str(cfg), "--epochs", "1", "--run-dir", str(run)]) == 0
    c = RunRecord.read(run).config
    assert (c["epochs"], c["batch_size"], c["lr"]) == (1, 32, 0.02)


def test_data_dir_from_environment(fake_mnist, tmp_path, monkeypatch):
    monkeypatch.setenv("MMRB_DATA_DIR", str(fake_mnist))
    assert main(["train", "--epochs", "1", "--batch-size", "32", "--run-dir", str(tmp_path / "r")]) == 0


def test_missing_data_dir_exits_2_without_outputs(tmp_path, monkeypatch):
    monkeypatch.delenv("MMRB_DATA_DIR", raising=False)
    out = tmp_path / "runs"
    assert main(["train", "--data-dir", str(tmp_path / "none"), "--out", str(out)]) == 2
    assert not out.exists()
    assert main(["train", "--out", str(out)]) == 2


@pytest.mark.parametrize("argv", [
    ["train", "--protect", "10"],
    ["train", "--cost", "0.5"],
    ["train", "--filters", "5"],
    ["train", "--regime", "bogus"],
    ["train", "--config", "/nonexistent.cfg"],
])
def test_train_usage_errors(argv, fake_mnist):
    assert main(argv + ["--data-dir", str(fake_mnist)]) == 2


def test_bad_config_key(fake_mnist, tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("colour = blue\n")
    assert main(["train", "--config", str(cfg), "--data-dir", str(fake_mnist)]) == 2
    with pytest.raises(UsageError):
        parse_config_text("no equals sign")


def test_run_directory_naming(fake_mnist, tmp_path, capsys):
    out = tmp_path / "runs"
    for _ in range(2):
        assert main(["train", "--data-dir", str(fake_mnist), "--epochs", "1", "--out", str(out), "--seed", "11"]) == 0
    names = sorted(p.name for p in out.iterdir())
    assert len(names) == 2 and all("-seed11" in n for n in names)


def test_attack_csv_schema_and_record_link(trained, fake_mnist):
    ckpt = trained / "model.ckpt"
    assert main(["attack", "--model", str(ckpt), "--data-dir", str(fake_mnist), "--attack", "pgd",
                 "--epsilon", "0.3", "--steps", "3"]) == 0
    rows = _rows(trained / "reports.csv")
    assert len(rows) == 1 and rows[0]["attack"] == "pgd" and rows[0]["epsilon"] == "0.3"
    assert all(rows[0][f"o{i}"] != "" for i in range(10)) and rows[0]["ce"] == ""
    assert RunRecord.read(trained).reports == ["reports.csv"]


def test_zero_budget_attack_matches_eval(trained, fake_mnist, tmp_path):
    ckpt = trained / "model.ckpt"
    main(["attack", "--model", str(ckpt), "--data-dir", str(fake_mnist), "--epsilon", "0", "--steps", "2",
          "--out", str(tmp_path / "a.csv")])
    main(["eval", "--model", str(ckpt), "--data-dir", str(fake_mnist), "--out", str(tmp_path / "e.csv")])
    a, e = _rows(tmp_path / "a.csv")[0], _rows(tmp_path / "e.csv")[0]
    keys = ["overall"] + [f"o{i}" for i in range(10)]
    assert [a[k] for k in keys] == [e[k] for k in keys]


def test_full_sweep_yields_six_rows(trained, fake_mnist, tmp_path):
    out = tmp_path / "sweep.csv"
    assert main(["attack", "--model", str(trained / "model.ckpt"), "--data-dir", str(fake_mnist), "--attack", "all",
                 "--epsilon", "0.1", "--steps", "2", "--cw-iterations", "3", "--limit-test", "10",
                 "--out", str(out)]) == 0
    assert [r["attack"] for r in _rows(out)] == ["fgsm", "pgd", "bim_linf", "bim_l2", "mim", "cw"]


@pytest.mark.parametrize("extra", [["--attack", "deepfool"], ["--epsilon", "-0.1"], ["--epsilon", "none"],
                                   ["--workers", "0"]])
def test_attack_usage_errors(trained, fake_mnist, extra):
    assert main(["attack", "--model", str(trained / "model.ckpt"), "--data-dir", str(fake_mnist), *extra]) == 2


def test_missing_and_corrupt_checkpoints(fake_mnist, tmp_path):
    assert main(["eval", "--model", str(tmp_path / "none.ckpt"), "--data-dir", str(fake_mnist)]) == 2
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"MMRB\x01\x00")
    assert main(["eval", "--model", str(bad), "--data-dir", str(fake_mnist)]) == 1


def test_diagnose_zero_checkpoint(tmp_path):
    m = build_lenet()
    zero = Model(m.layers, m.input_shape, {n: np.zeros_like(t.data) for n, t in m.params.items()})
    save_checkpoint(zero, tmp_path / "z.ckpt")
    out = tmp_path / "d.csv"
    assert main(["diagnose", "--model", str(tmp_path / "z.ckpt"), "--out", str(out),
                 "--dump-dir", str(tmp_path / "dump")]) == 0
    rows = _rows(out)
    assert [r["layer"] for r in rows] == ["conv1.weight", "conv2.weight"]
    for r in rows:
        assert abs(float(r["fuzziness"]) - 0.6931) <= 1e-4 and float(r["near_zero_fraction"]) == 1.0
    assert len((tmp_path / "dump" / "conv2_weight_profile.txt").read_text().splitlines()) == 2001


def test_compare_with_itself_is_all_zero(trained, fake_mnist, capsys):
    main(["attack", "--model", str(trained / "model.ckpt"), "--data-dir", str(fake_mnist), "--attack", "fgsm,pgd",
          "--epsilon", "0.1,0.3", "--steps", "2"])
    capsys.readouterr()
    assert main(["compare", "--baseline", str(trained), str(trained)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "attack,epsilon,protected,method,baseline,delta"
    assert all(line.split(",")[-1] == "0" for line in lines[1:5])
    assert lines[-1] == "wins,0,ties,4,losses,0"


def test_compare_without_shared_reports(trained, fake_mnist, tmp_path):
    other = _train(fake_mnist, tmp_path / "other")
    main(["attack", "--model", str(trained / "model.ckpt"), "--data-dir", str(fake_mnist), "--attack", "fgsm"])
    main(["attack", "--model", str(other / "model.ckpt"), "--data-dir", str(fake_mnist), "--attack", "pgd",
          "--steps", "1"])
    assert main(["compare", "--baseline", str(other), str(trained)]) == 2
    assert main(["compare", "--baseline", str(tmp_path / "missing"), str(trained)]) == 2


def test_attack_appends_rows(trained, fake_mnist):
    for eps in ("0.1", "0.2"):
        main(["attack", "--model", str(trained / "model.ckpt"), "--data-dir", str(fake_mnist), "--attack", "fgsm",
              "--epsilon", eps])
    assert [r["epsilon"] for r in _rows(trained / "reports.csv")] == ["0.1", "0.2"]
    assert json.loads((trained / "record.json").read_text())["reports"] == ["reports.csv"]


def test_version_flag(capsys):
    assert main(["--version"]) == 0
    assert capsys.readouterr().out.startswith("mmrb ")
