import csv

from rapidgnn.cli import EXIT_CONFIG, EXIT_OK, EXIT_ORACLE, main

FAST = ["--num-nodes", "400", "--epochs", "1", "--batch-size", "64", "--n-hot", "64"]


def test_run_writes_metrics(tmp_path, capsys):
    out = tmp_path / "res"
    code = main(["run", *FAST, "--workers", "2", "--fanout", "5,3", "--mode", "rapidgnn", "--out", str(out)])
    assert code == EXIT_OK
    with open(out / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 and rows[0]["mode"] == "rapidgnn"
    assert "epoch 0:" in capsys.readouterr().out


def test_compare_prints_ratio(capsys):
    assert main(["run", *FAST, "--compare"]) == EXIT_OK
    assert "fetch-wait ratio" in capsys.readouterr().out


def test_config_file_and_override(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("num_nodes = 400\nepochs = 1\nmode = baseline\nworkers = 3\n")
    out = tmp_path / "o"
    assert main(["run", "--config", str(cfg), "--workers", "2", "--out", str(out)]) == EXIT_OK
    with open(out / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["worker"] for r in rows} == {"0", "1"} and rows[0]["mode"] == "baseline"


def test_config_errors_exit_one(tmp_path, capsys):
    assert main(["run", "--workers", "0"]) == EXIT_CONFIG
    assert main(["run", "--mode", "turbo"]) == EXIT_CONFIG
    assert main(["run", "--config", str(tmp_path / "missing.cfg")]) == EXIT_CONFIG
    assert main(["run", "--fanout", "a,b"]) == EXIT_CONFIG
    assert main(["scale", "--scale-workers", "0"]) == EXIT_CONFIG
    assert "configuration error" in capsys.readouterr().err


def test_unknown_flag_exits_one(capsys):
    try:
        main(["run", "--bogus"])
    except SystemExit as exc:
        assert exc.code == EXIT_CONFIG
    else:  # pragma: no cover
        raise AssertionError("expected SystemExit")


def test_verify_exit_codes(capsys):
    assert main(["verify", *FAST]) == EXIT_OK
    assert "PASS miss_set_replay" in capsys.readouterr().out
    assert main(["verify", *FAST, "--hot-set-delta", "1"]) == EXIT_ORACLE
    assert "FAIL miss_set_replay" in capsys.readouterr().out


def test_scale(capsys, tmp_path):
    assert main(["scale", *FAST, "--scale-workers", "2,3", "--out", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "scaling.csv").exists()
    assert "P=3" in capsys.readouterr().out


def test_module_entry_point():
    import subprocess
    import sys

    r = subprocess.run([sys.executable, "-m", "rapidgnn", "run", "--workers", "0"], capture_output=True, text=True)
    assert r.returncode == EXIT_CONFIG
