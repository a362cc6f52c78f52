import csv
import io
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from rdpcalc.cli import (CSV_FIELDS, EXIT_CONFIG, EXIT_OK, EXIT_SOLVER, epsilon_schedule,
                         load_matrix, load_source, main, monotonicity_warnings,
                         parse_grid)
from rdpcalc.core import ConfigurationError, DomainError


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def rows(text):
    return list(csv.DictReader(io.StringIO(text)))


# -- parsing helpers -------------------------------------------------------

def test_parse_grid():
    assert parse_grid("0.03:0.15:0.03") == pytest.approx([0.03, 0.06, 0.09, 0.12, 0.15])
    assert parse_grid("1:5:1") == [1.0, 2.0, 3.0, 4.0, 5.0]
    assert parse_grid("0.1,0.2,0.5") == [0.1, 0.2, 0.5]
    for bad in ("0.2,0.1", "1:0:1", "1:5:0", "", "a:b:c"):
        with pytest.raises(ConfigurationError):
            parse_grid(bad)


def test_epsilon_schedule():
    assert epsilon_schedule(0.01) == [0.01]
    assert epsilon_schedule(0.1) == [0.1]
    assert epsilon_schedule(0.001) == pytest.approx([0.01, 0.001])
    assert epsilon_schedule(0.0005) == pytest.approx([0.01, 0.001, 0.0005])


def test_source_specs(tmp_path):
    assert load_source("bernoulli:0.1").p == pytest.approx([0.1, 0.9])
    assert load_source("gaussian:0,2,8,0.5").size == 33
    f = tmp_path / "src.json"
    f.write_text(json.dumps({"points": [0, 1, 2], "p": [0.2, 0.3, 0.5]}))
    assert load_source(str(f)).p == pytest.approx([0.2, 0.3, 0.5])
    with pytest.raises((ConfigurationError, DomainError)):
        load_source("poisson:3")


def test_matrix_file(tmp_path):
    f = tmp_path / "m.json"
    f.write_text(json.dumps({"rows": 2, "cols": 3, "data": [0, 1, 2, 3, 4, 5]}))
    np.testing.assert_array_equal(load_matrix(str(f)), [[0, 1, 2], [3, 4, 5]])
    f.write_text(json.dumps({"rows": 2, "cols": 2, "data": [0, 1, 2]}))
    with pytest.raises((ConfigurationError, DomainError)):
        load_matrix(str(f))


def test_monotonicity_warnings():
    recs = [{"D": 1, "P": 0.1, "rate_nats": 0.5, "converged": True},
            {"D": 2, "P": 0.1, "rate_nats": 0.6, "converged": True}]
    assert len(monotonicity_warnings(recs, [1, 2], [0.1])) == 1
    recs[1]["rate_nats"] = 0.4
    assert monotonicity_warnings(recs, [1, 2], [0.1]) == []


# -- solve -----------------------------------------------------------------

def test_solve_binary_tv(capsys, tmp_path):
    trace = tmp_path / "trace.tsv"
    code, out, _ = run(capsys, "solve", "--preset", "binary-tv", "--D", "0.06",
                       "--trace", str(trace))
    rec = json.loads(out)
    assert code == EXIT_OK
    assert rec["converged"] is True
    for key in ("D", "P", "rate_nats", "rate_bits", "achieved_distortion",
                "achieved_perception", "outer_iters", "converged", "duals"):
        assert key in rec
    assert rec["rate_bits"] == pytest.approx(rec["rate_nats"] / math.log(2), rel=1e-15)
    assert rec["achieved_distortion"] <= 0.06 + 1e-7
    assert rec["metadata"]["seed"] == 0
    lines = trace.read_text().splitlines()
    assert lines[0] == "iter\tobjective\tdistortion\tperception"
    assert len(lines) == rec["outer_iters"] + 1
    assert all(len(line.split("\t")) == 4 for line in lines)


def test_solve_gaussian_kl(capsys):
    code, out, _ = run(capsys, "solve", "--preset", "gaussian-kl", "--D", "3.0")
    rec = json.loads(out)
    assert code in (EXIT_OK, EXIT_SOLVER)
    assert rec["rate_nats"] > 0
    assert rec["achieved_distortion"] <= 3.0 + 1e-7


def test_solve_large_budgets_rate_zero(capsys):
    code, out, _ = run(capsys, "solve", "--preset", "binary-tv", "--D", "10", "--P", "10")
    rec = json.loads(out)
    assert code == EXIT_OK
    assert rec["rate_nats"] == pytest.approx(0.0, abs=1e-9)


def test_solve_csv_format(capsys):
    code, out, _ = run(capsys, "solve", "--preset", "binary-tv", "--D", "0.06",
                       "--format", "csv")
    assert code == EXIT_OK
    assert out.splitlines()[0] == ",".join(CSV_FIELDS)
    assert rows(out)[0]["converged"] == "true"


def test_solve_from_config_file(capsys, tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"source": "bernoulli:0.1", "distortion": "hamming",
                               "perception": "kl", "D": 0.05, "P": 0.05}))
    code, out, _ = run(capsys, "solve", "--config", str(cfg), "--P", "0.01")
    rec = json.loads(out)
    assert code == EXIT_OK
    assert rec["P"] == 0.01  # flags override the file


def test_solve_with_matrix_files(capsys, tmp_path):
    src = tmp_path / "src.json"
    src.write_text(json.dumps({"points": [0, 1, 2], "p": [0.2, 0.3, 0.5]}))
    dm = tmp_path / "d.json"
    dm.write_text(json.dumps({"rows": 3, "cols": 3,
                              "data": [0, 1, 4, 1, 0, 1, 4, 1, 0]}))
    code, out, _ = run(capsys, "solve", "--source", str(src), "--distortion", str(dm),
                       "--perception", f"wasserstein:{dm}", "--D", "0.3", "--P", "0.2")
    rec = json.loads(out)
    assert code == EXIT_OK
    assert rec["converged"] is True
    assert "regularized_objective" in rec


def test_solve_rejects_grid_and_bad_config(capsys):
    assert run(capsys, "solve", "--preset", "binary-tv")[0] == EXIT_CONFIG
    assert run(capsys, "solve", "--source", "bernoulli:0.1", "--D", "0.1")[0] == EXIT_CONFIG
    assert run(capsys, "solve", "--preset", "binary-tv", "--D", "0.06",
               "--epsilon", "0")[0] == EXIT_CONFIG
    assert run(capsys, "solve", "--preset", "binary-tv", "--D", "0.06",
               "--perception", "hellinger")[0] == EXIT_CONFIG
    with pytest.raises(SystemExit) as exc:
        main(["solve", "--preset", "no-such-preset"])
    assert exc.value.code == EXIT_CONFIG


def test_solve_infeasible_exits_3(capsys):
    code, out, err = run(capsys, "solve", "--preset", "binary-tv", "--D", "0")
    assert code == EXIT_SOLVER
    assert json.loads(out)["converged"] is False
    assert "error" in err


def test_solve_iteration_cap_exits_3(capsys):
    code, out, _ = run(capsys, "solve", "--preset", "binary-tv", "--D", "0.06",
                       "--max-outer", "2")
    assert code == EXIT_SOLVER
    assert json.loads(out)["converged"] is False


# -- sweep -----------------------------------------------------------------

def test_sweep_binary_preset(capsys):
    code, out, _ = run(capsys, "sweep", "--preset", "binary-tv", "--format", "csv",
                       "--check-monotone")
    assert code == EXIT_OK
    assert out.splitlines()[0] == "D,P,rate_nats,rate_bits,achieved_distortion," \
                                  "achieved_perception,outer_iters,converged"
    table = rows(out)
    assert [float(r["D"]) for r in table] == pytest.approx([0.03, 0.06, 0.09, 0.12, 0.15])
    rates = [float(r["rate_nats"]) for r in table]
    assert all(b <= a + 1e-9 for a, b in zip(rates, rates[1:]))
    for r in table:
        assert float(r["rate_bits"]) == pytest.approx(float(r["rate_nats"]) / math.log(2),
                                                      rel=1e-15)


def test_sweep_row_major_order(capsys):
    code, out, _ = run(capsys, "sweep", "--preset", "binary-tv", "--D-grid", "0.05,0.1",
                       "--P-grid", "0.01,0.02,0.05", "--format", "csv")
    assert code == EXIT_OK
    keys = [(float(r["D"]), float(r["P"])) for r in rows(out)]
    assert keys == [(0.05, 0.01), (0.05, 0.02), (0.05, 0.05),
                    (0.1, 0.01), (0.1, 0.02), (0.1, 0.05)]


def test_sweep_single_cell_matches_solve(capsys):
    _, solve_out, _ = run(capsys, "solve", "--preset", "binary-tv", "--D", "0.06",
                          "--format", "csv")
    _, sweep_out, _ = run(capsys, "sweep", "--preset", "binary-tv", "--D-grid", "0.06",
                          "--format", "csv")
    assert solve_out == sweep_out


def test_sweep_infeasible_cell_keeps_going(capsys):
    code, out, err = run(capsys, "sweep", "--preset", "binary-tv", "--D-grid", "0,0.06",
                         "--format", "csv")
    assert code == EXIT_OK
    table = rows(out)
    assert [r["converged"] for r in table] == ["false", "true"]
    assert table[0]["rate_nats"] == ""
    assert "1 cell(s)" in err


def test_sweep_is_deterministic(capsys):
    args = ("sweep", "--preset", "binary-tv", "--D-grid", "0.03,0.09", "--format", "json")
    assert run(capsys, *args)[1] == run(capsys, *args)[1]


def test_sweep_gaussian_kl_monotone(capsys):
    code, out, _ = run(capsys, "sweep", "--preset", "gaussian-kl", "--format", "csv")
    assert code == EXIT_OK
    rates = [float(r["rate_nats"]) for r in rows(out)]
    assert len(rates) == 5
    assert all(b <= a + 1e-7 for a, b in zip(rates, rates[1:]))


# -- oracle ----------------------------------------------------------------

def test_oracle_binary_tv(capsys):
    code, out, _ = run(capsys, "oracle", "--preset", "binary-tv", "--D", "0.06")
    rec = json.loads(out)
    assert code == EXIT_OK
    assert rec["abs_diff"] <= 1e-6
    assert rec["abs_diff"] == pytest.approx(abs(rec["solver_rate"] - rec["oracle_rate"]))


def test_oracle_random_3x3(capsys):
    code, out, _ = run(capsys, "oracle", "--random", "3", "--seed", "1")
    rec = json.loads(out)
    assert code == EXIT_OK
    assert rec["abs_diff"] <= 1e-4
    assert rec["metadata"]["seed"] == 1


def test_oracle_slack_budgets(capsys):
    code, out, _ = run(capsys, "oracle", "--source", "bernoulli:0.3", "--distortion",
                       "hamming", "--perception", "kl", "--D", "0.5", "--P", "1")
    rec = json.loads(out)
    assert code == EXIT_OK
    assert rec["oracle_rate"] == pytest.approx(0.0, abs=1e-12)
    assert rec["solver_rate"] == pytest.approx(0.0, abs=1e-9)


def test_oracle_oversize_exits_2(capsys):
    code, _, err = run(capsys, "oracle", "--preset", "gaussian-kl", "--D", "3")
    assert code == EXIT_CONFIG
    assert "too large" in err


# -- discretize ------------------------------------------------------------

def test_discretize(capsys, tmp_path):
    out_file = tmp_path / "g.json"
    code, _, err = run(capsys, "discretize", "--source", "gaussian:0,2,8,0.5",
                       "--output", str(out_file))
    doc = json.loads(out_file.read_text())
    assert code == EXIT_OK
    assert len(doc["points"]) == len(doc["p"]) == 33
    assert math.fsum(doc["p"]) == pytest.approx(1.0, abs=1e-15)
    assert "N=33" in err
    # outer cells end half a step past S, so the renormalized-away mass is
    # the normal tail beyond 8.25 = 4.125 sigma on each side
    assert doc["metadata"]["truncated_tail_mass"] == pytest.approx(
        math.erfc(4.125 / math.sqrt(2)), rel=1e-12)
    # the written file is a valid source spec
    assert load_source(str(out_file)).size == 33


def test_gaussian_records_carry_tail_mass(capsys):
    code, out, _ = run(capsys, "solve", "--preset", "gaussian-kl", "--D", "3", "--P", "0.2",
                       "--max-outer", "5")
    meta = json.loads(out)["metadata"]
    assert meta["truncated_tail_mass"] == pytest.approx(math.erfc(4.125 / math.sqrt(2)),
                                                        rel=1e-12)


def test_console_script_entry_point():
    res = subprocess.run([sys.executable, "-m", "rdpcalc.cli", "solve", "--preset",
                          "binary-tv", "--D", "0.06"], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert json.loads(res.stdout)["converged"] is True
