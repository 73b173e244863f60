import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from fisher_prd.cli import main
from fisher_prd.serialization import read_bids, read_certificate, read_trajectory, write_bids


@pytest.fixture
def market_file(tmp_path):
    path = tmp_path / "market.json"
    assert main(["generate", "--n", "10", "--m", "10", "--seed", "7", "--out", str(path)]) == 0
    return path


def test_generate_then_run(tmp_path, market_file):
    out = tmp_path / "traj.csv"
    code = main(["run", "--market", str(market_file), "--rule", "prd", "--schedule", "round-robin",
                 "--steps", "100000", "--record-every", "10", "--out", str(out)])
    assert code == 0
    data = read_trajectory(out)
    assert np.all(np.diff(data["potential"]) >= -1e-12)
    assert data["distance"][-1] < data["distance"][0]


def test_solve_then_verify(tmp_path, market_file, capsys):
    cert = tmp_path / "cert.json"
    assert main(["solve", "--market", str(market_file), "--out", str(cert)]) == 0
    data = read_certificate(cert)
    assert data["methods_agree"] is True
    assert main(["verify", "--market", str(market_file), "--bids", str(cert)]) == 0
    out = capsys.readouterr().out
    assert "accepted: True" in out
    residuals = {line.split(":")[0]: float(line.split(":")[1]) for line in out.splitlines()
                 if line.split(":")[0] in ("clearing", "budget", "optimality")}
    assert max(residuals.values()) <= 1e-6


def test_verify_rejects_non_equilibrium(tmp_path, market_file):
    bids = tmp_path / "b.json"
    b = np.full((10, 10), 0.0)
    market = json.loads(market_file.read_text())
    b[:] = np.array(market["budgets"])[:, None] / 10
    write_bids(b, bids)
    cert = tmp_path / "c.json"
    assert main(["verify", "--market", str(market_file), "--bids", str(bids), "--out", str(cert)]) == 1
    assert np.array_equal(read_bids(cert), b)


def test_run_rejects_schedule_that_is_not_live(tmp_path, market_file):
    sched = tmp_path / "s.json"
    sched.write_text(json.dumps([[0], [1], [2]] * 5))
    code = main(["run", "--market", str(market_file), "--schedule", str(sched), "--require-T", "5",
                 "--no-oracle", "--out", str(tmp_path / "t.csv")])
    assert code == 1


def test_run_with_live_schedule_file(tmp_path, market_file):
    sched = tmp_path / "s.json"
    sched.write_text(json.dumps({"T": 1, "steps": [list(range(10))] * 20}))
    code = main(["run", "--market", str(market_file), "--schedule", str(sched), "--require-T", "1",
                 "--no-oracle", "--out", str(tmp_path / "t.csv")])
    assert code == 0
    assert read_trajectory(tmp_path / "t.csv")["t"][-1] == 20


def test_required_convergence_failure_exits_2(tmp_path, market_file):
    code = main(["run", "--market", str(market_file), "--steps", "30", "--require-convergence",
                 "--no-oracle", "--out", str(tmp_path / "t.csv")])
    assert code == 2


def test_oracle_failure_exits_2(tmp_path, market_file, monkeypatch):
    from fisher_prd import cli
    from fisher_prd.errors import OracleFailureError

    def fail(*a, **k):
        raise OracleFailureError("stuck")

    monkeypatch.setattr(cli, "compute_equilibrium", fail)
    assert main(["solve", "--market", str(market_file), "--out", str(tmp_path / "c.json")]) == 2


def test_usage_errors_exit_1(tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 1
    with pytest.raises(SystemExit) as info:
        main(["generate", "--n", "2"])
    assert info.value.code == 1
    assert "usage" in capsys.readouterr().err
    assert main(["run", "--market", str(tmp_path / "missing.json"), "--out", "x.csv"]) == 1


def test_invalid_market_exits_1(tmp_path):
    path = tmp_path / "m.json"
    path.write_text(json.dumps({"n": 2, "m": 1, "budgets": [0.9, 0.9], "valuations": [[1.0], [1.0]]}))
    assert main(["solve", "--market", str(path), "--out", str(tmp_path / "c.json")]) == 1


def test_ensemble_and_report(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"market": {"n": 3, "m": 3}, "dynamics": {"max_steps": 300, "record_every": 10},
                               "ensemble": {"size": 2, "seed": 1, "workers": 1}}))
    out = tmp_path / "ens"
    assert main(["ensemble", "--config", str(cfg), "--out-dir", str(out), "--size", "3"]) == 0
    assert (out / "run_0002.csv").exists() and not (out / "run_0003.csv").exists()
    table = tmp_path / "table.csv"
    assert main(["report", str(out / "aggregate.csv"), str(out / "run_0000.csv"), "--out", str(table)]) == 0
    with open(table) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["source", "t", "metric", "value"]
    assert {r[0] for r in rows[1:]} == {"aggregate.csv", "run_0000.csv"}


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "fisher_prd", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "generate" in res.stdout
