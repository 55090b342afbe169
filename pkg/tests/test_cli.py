import csv

import pytest

from exchangeable.cli import main
from exchangeable.config import load_config

TINY = """\
[env]
name = scavenger1
num_food = 2

[encoder]
type = attention
k = 4
hidden = 8

[ppo]
iters = 3
rollout_steps = 64
minibatch_size = 32
update_epochs = 2
trunk_hidden = 8

[run]
workers = 1
checkpoint_every = 2
"""


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "scav1.cfg"
    path.write_text(TINY)
    return path


def rows_without_wall(path):
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r.pop("wall_seconds")
    return rows


def test_train_artifacts(cfg_file, tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["train", "--config", str(cfg_file), "--set", "env.num_food=1", "--seed", "7", "--out", str(out), "--quiet"])
    assert code == 0
    assert {"metrics.csv", "ckpt_final.txt", "ckpt_2.txt", "config.cfg"} <= {p.name for p in out.iterdir()}
    rows = rows_without_wall(out / "metrics.csv")
    assert [r["iteration"] for r in rows] == ["1", "2", "3"]
    assert rows[0]["run_id"] == "scavenger1-attention-n1-s7"
    # the saved config reproduces the run
    saved = load_config(out / "config.cfg")
    assert saved.seed == 7 and saved.env_overrides["num_food"] == 1


def test_train_deterministic(cfg_file, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["train", "--config", str(cfg_file), "--seed", "3", "--out", str(out), "--quiet"]) == 0
    assert rows_without_wall(a / "metrics.csv") == rows_without_wall(b / "metrics.csv")
    assert (a / "ckpt_final.txt").read_text() == (b / "ckpt_final.txt").read_text()


def test_train_ordered_on_convoy(cfg_file, tmp_path):
    out = tmp_path / "convoy"
    code = main([
        "train", "--config", str(cfg_file), "--set", "env.name=convoy", "--set", "encoder.type=ordered",
        "--set", "ppo.iters=1", "--out", str(out), "--quiet",
    ])
    # num_food is not a convoy setting
    assert code == 2
    cfg_file.write_text(TINY.replace("num_food = 2", "max_attackers = 4"))
    code = main([
        "train", "--config", str(cfg_file), "--set", "env.name=convoy", "--set", "encoder.type=ordered",
        "--set", "ppo.iters=1", "--out", str(out), "--quiet",
    ])
    assert code == 0
    assert "convoy-ordered-n3-s0" in (out / "metrics.csv").read_text()


def test_unknown_key_exit_2(cfg_file, tmp_path, capsys):
    assert main(["train", "--config", str(cfg_file), "--set", "ppo.lr_rate=0.1", "--out", str(tmp_path)]) == 2
    assert "ppo.lr_rate" in capsys.readouterr().err
    cfg_file.write_text(TINY.replace("k = 4", "kk = 4"))
    assert main(["train", "--config", str(cfg_file), "--out", str(tmp_path)]) == 2
    assert "kk" in capsys.readouterr().err
    assert main(["train", "--set", "encoder.type=transformer", "--out", str(tmp_path)]) == 2


def test_sweep_cross_product_and_resume(cfg_file, tmp_path, capsys):
    out = tmp_path / "sweep"
    args = ["sweep", "--config", str(cfg_file), "--set", "ppo.iters=2", "--num-food", "1,2",
            "--encoders", "attention,ordered", "--seeds", "0", "--out", str(out), "--quiet", "--threshold", "-10"]
    assert main(args) == 0
    cells = sorted(p.name for p in out.iterdir() if p.is_dir())
    assert cells == [
        "scavenger1-attention-n1-s0", "scavenger1-attention-n2-s0",
        "scavenger1-ordered-n1-s0", "scavenger1-ordered-n2-s0",
    ]
    assert (out / "summary.txt").exists()
    with open(out / "summary.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 4
    capsys.readouterr()
    before = (out / cells[0] / "metrics.csv").read_text()
    assert main(args) == 0
    text = capsys.readouterr().out
    assert text.count("skip ") == 4 and "run  " not in text
    assert (out / cells[0] / "metrics.csv").read_text() == before


def test_sweep_flags_below_threshold(cfg_file, tmp_path, capsys):
    out = tmp_path / "sweep"
    args = ["sweep", "--config", str(cfg_file), "--set", "ppo.iters=1", "--encoders", "attention",
            "--out", str(out), "--quiet", "--threshold", "5"]
    assert main(args) == 0
    with open(out / "summary.csv") as fh:
        (row,) = list(csv.DictReader(fh))
    assert row["below_threshold"] == "yes"


def test_verify_default_passes(capsys):
    assert main(["verify"]) == 0
    out = capsys.readouterr().out
    assert "ALL PASS" in out and "FAIL]" not in out


def test_verify_fault_injection_isolates_sum_form(capsys):
    assert main(["verify", "--trials", "200", "--inject", "skip-softmax"]) == 1
    lines = capsys.readouterr().out.splitlines()
    status = {line.split("]")[1].split("worst=")[0].strip(): line[1:5] for line in lines if line.startswith("[")}
    assert status["sum decomposition"] == "FAIL"
    assert all(v == "PASS" for k, v in status.items() if k != "sum decomposition")


def test_verify_zero_tolerance_fails(capsys):
    assert main(["verify", "--trials", "200", "--tolerance", "0"]) == 1
    assert "FAILURES" in capsys.readouterr().out


def test_verify_trials_checked(capsys):
    assert main(["verify", "--trials", "0"]) == 2


def test_space_report(tmp_path, capsys):
    assert main(["space-report", "--n", "5", "--m", "2", "--csv", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    for token in ("20", "10", "2"):
        assert token in out
    assert (tmp_path / "space_report.csv").read_text().splitlines()[1] == "5,2,20,10,2"
    assert main(["space-report", "--n", "30", "--m", "10"]) == 0
    out = capsys.readouterr().out
    assert "109027350432000" in out and "30045015" in out and "3628800" in out
    assert main(["space-report", "--n", "4", "--m", "1"]) == 0
    assert main(["space-report", "--n", "2", "--m", "3"]) == 2


def test_eval(cfg_file, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg_file), "--set", "ppo.iters=1", "--out", str(out), "--quiet"]) == 0
    ckpt = str(out / "ckpt_final.txt")
    capsys.readouterr()
    args = ["eval", "--config", str(cfg_file), "--checkpoint", ckpt, "--episodes", "1", "--seed", "3"]
    assert main(args) == 0
    first = capsys.readouterr().out
    assert main(args) == 0
    assert capsys.readouterr().out == first
    assert main(["eval", "--config", str(cfg_file), "--checkpoint", ckpt, "--episodes", "20"]) == 0
    ret = float(next(line for line in capsys.readouterr().out.splitlines() if line.startswith("mean_return")).split()[1])
    assert -0.05 * 100 - 1e-9 <= ret <= 1.0


def test_eval_mismatch_exit_2(cfg_file, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg_file), "--set", "ppo.iters=1", "--out", str(out), "--quiet"]) == 0
    code = main(["eval", "--config", str(cfg_file), "--set", "encoder.k=5",
                 "--checkpoint", str(out / "ckpt_final.txt"), "--episodes", "1"])
    assert code == 2
    assert "block" in capsys.readouterr().err
    assert main(["eval", "--config", str(cfg_file), "--checkpoint", str(tmp_path / "missing.txt")]) == 2
