import csv
import json

import pytest

from agebif.cli import main


def run(tmp_path, *args, config=None):
    out = tmp_path / "out"
    argv = list(args) + ["--out", str(out), "--quiet"]
    if config is not None:
        path = tmp_path / "run.ini"
        path.write_text(config)
        argv += ["--config", str(path)]
    code = main(argv)
    summary = json.loads((out / "summary.json").read_text())
    return code, out, summary


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_critical_neumann(tmp_path):
    code, out, summary = run(tmp_path, "critical", "--family", "neumann-constant")
    assert code == 0
    assert summary["lambda0"] == pytest.approx(1.5936, abs=1e-3)
    assert summary["sigma1"] == 0.0 and summary["grid"]["n"] == 64
    curve = rows(out / "rq_curve.csv")
    assert list(curve[0]) == ["lambda", "r", "iterations"] and len(curve) == 21
    assert float(curve[0]["r"]) == pytest.approx(2.0)
    assert len(rows(out / "eigenvector.csv")) == 65


def test_precondition_exit_code(tmp_path, capsys):
    code, _, summary = run(tmp_path, "critical", config="[model]\nbirth = 0.5\n")
    assert code == 2
    assert summary["verdict"] == "n/a" and summary["lambda0"] is None
    assert "growth condition" in summary["message"]
    assert summary["sigma1"] == 0.0 and summary["grid"] is not None
    assert "growth condition" in capsys.readouterr().err


def test_malformed_coefficient(tmp_path):
    code, _, summary = run(tmp_path, "critical", config="[model]\nbirth = 2 * (1 +\n")
    assert code == 1
    assert "position" in summary["message"]
    for key in ("lambda0", "sigma1", "grid", "verdict"):
        assert key in summary


def test_bad_grid_override(tmp_path):
    code, _, summary = run(tmp_path, "critical", "--n", "4")
    assert code == 1 and "n >= 8" in summary["message"]


def test_branch_subcritical(tmp_path):
    code, out, summary = run(tmp_path, "branch", "--family", "subcritical-neumann", "--n", "32", "--M", "80")
    assert code == 0
    assert summary["subcritical"] is True and summary["verdict"] == "subcritical"
    table = rows(out / "branch.csv")
    assert list(table[0]) == ["eps", "lambda", "l2_norm_u", "sup_norm_u", "min_u", "residual", "newton_iters"]
    for r in table:
        if float(r["eps"]) > 0:
            assert float(r["min_u"]) >= -1e-8 * float(r["sup_norm_u"])
            assert float(r["lambda"]) <= summary["lambda0"] + 1e-6
        assert float(r["residual"]) <= 1e-9


def test_branch_zero_range(tmp_path):
    code, out, summary = run(tmp_path, "branch", config="[continuation]\neps_max = 0\n")
    assert code == 0
    table = rows(out / "branch.csv")
    assert len(table) == 1 and float(table[0]["eps"]) == 0.0
    assert float(table[0]["lambda"]) == pytest.approx(summary["lambda0"])
    assert summary["verdict"] == "n/a"


def test_branch_holling_tanner(tmp_path):
    code, out, summary = run(tmp_path, "branch", "--family", "holling-tanner", "--n", "16", "--M", "100")
    assert code == 0
    assert summary["lambda0"] == pytest.approx(2.256, abs=5e-3)
    assert summary["branch"]["positive_points"] > 0


def test_mode_and_sign_flags(tmp_path):
    code, _, summary = run(
        tmp_path, "critical", "--mode", "holling-tanner", "--sign", "-", "--n", "16", "--M", "100",
        config="[model]\nmortality = 0\nbirth = 0.5\n",
    )
    assert code == 0
    assert summary["model"]["reaction_sign"] == -1 and summary["model"]["mode"] == "holling-tanner"


def test_validate_families(tmp_path):
    code, out, summary = run(tmp_path, "validate", "--family", "neumann-constant", "--n", "8", "--M", "8")
    assert code == 0 and summary["verdict"] == "pass"
    assert {r["result"] for r in rows(out / "validate.csv")} == {"pass"}


def test_validate_peclet_failure(tmp_path, capsys):
    code, out, summary = run(tmp_path, "validate", "--family", "peclet-drift", "--n", "16", "--M", "20")
    assert code == 1
    assert summary["invariants"]["positivity"]["passed"] is False
    assert "Peclet" in summary["invariants"]["positivity"]["detail"]
    assert "positivity" in capsys.readouterr().err


def test_threads_env_gives_same_output(tmp_path, monkeypatch):
    code, out1, _ = run(tmp_path / "a", "critical", "--family", "neumann-constant")
    monkeypatch.setenv("AGEBIF_THREADS", "4")
    code2, out2, _ = run(tmp_path / "b", "critical", "--family", "neumann-constant")
    assert code == code2 == 0
    for name in ("summary.json", "rq_curve.csv", "eigenvector.csv"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()
