import pytest

from trimlottery import cli, tasks
from trimlottery import model as M


@pytest.fixture
def toy_registered(monkeypatch, toy_task, toy_dataset):
    monkeypatch.setitem(tasks.TASKS, "toy", toy_task)
    monkeypatch.setitem(tasks.GENERATORS, "toy", lambda seed, **kw: toy_dataset)
    return toy_task


def test_run_then_report(tmp_path, toy_registered, capsys):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text("task = toy\niterations = 2\nrepetitions = 1\nepochs = 2\ntiming = false\n")
    out = tmp_path / "out"
    assert cli.main(["run", "--config", str(cfg), "--strategy", "trim", "--out", str(out)]) == 0
    assert "3 records" in capsys.readouterr().out
    (out / "summary.txt").unlink()
    assert cli.main(["report", "--out", str(out)]) == 0
    assert (out / "summary.txt").exists()


def test_config_error_exit_code(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("prune_rate = 1.2\n")
    assert cli.main(["run", "--config", str(cfg)]) == 2
    assert "prune_rate" in capsys.readouterr().err


def test_report_without_records(tmp_path):
    assert cli.main(["report", "--out", str(tmp_path)]) == 1


def test_inspect(tmp_path, capsys):
    m = M.build_model((M.output_dense(2),), (3,))
    M.save_checkpoint(m, tmp_path / "m.trim", role="rewind", epoch=4)
    assert cli.main(["inspect", str(tmp_path / "m.trim")]) == 0
    text = capsys.readouterr().out
    assert "params       8" in text and "flops        14" in text and "rewind, epoch 4" in text


def test_inspect_corrupt(tmp_path, capsys):
    (tmp_path / "bad.trim").write_bytes(b"junk")
    assert cli.main(["inspect", str(tmp_path / "bad.trim")]) == 1
    assert "cannot read" in capsys.readouterr().err


def test_verify_single_suite(capsys):
    assert cli.main(["verify", "--suite", "costs"]) == 0
    assert "[PASS]" in capsys.readouterr().out


def test_unknown_verb():
    with pytest.raises(SystemExit):
        cli.main(["dance"])
