import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from panelwald.cli import main
from panelwald.simulator import generate_data, get_scenario, rng_for

MODELS = Path(__file__).resolve().parents[1] / "models"


def _write_data(path, scenario, n, seed=1):
    sc = get_scenario(scenario)
    sigma = sc.sigma()
    X = generate_data(sigma.sigma, n, rng_for(seed))
    pd.DataFrame(X, columns=sc.var_names).to_csv(path, index=False)
    return path


def _body(path):
    return [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("# generated_at")]


def test_validate_reports_df(capsys):
    assert main(["validate", str(MODELS / "riclpm_4wave.txt")]) == 0
    out = capsys.readouterr().out
    assert "df = 9" in out and "full rank" in out


def test_validate_temporal_warning_is_informational(tmp_path, capsys):
    f = tmp_path / "m.txt"
    f.write_text("y1 ~ x2\n")
    assert main(["validate", "--model", str(f)]) == 0
    assert "TemporalOrderViolation" in capsys.readouterr().out


def test_validate_syntax_error(tmp_path, capsys):
    f = tmp_path / "bad.txt"
    f.write_text("x1 ~~ x1\ny1 =! x1\n")
    assert main(["validate", str(f)]) == 1
    err = capsys.readouterr().err
    assert f"{f}:2:" in err and "error" in err


def test_validate_empty_and_missing(tmp_path):
    f = tmp_path / "empty.txt"
    f.write_text("# nothing\n")
    assert main(["validate", str(f)]) == 1
    assert main(["validate", str(tmp_path / "absent.txt")]) == 1


def test_validate_dump_matrices(tmp_path):
    out = tmp_path / "out"
    assert main(["validate", str(MODELS / "clpm_4wave.txt"), "--dump-matrices",
                 "--out", str(out)]) == 0
    for name in ("A.csv", "S.csv", "F.csv"):
        assert (out / name).exists()


def test_fit_writes_outputs(tmp_path):
    data = _write_data(tmp_path / "d.csv", "Baseline4w", 10_000)
    out = tmp_path / "fit"
    assert main(["fit", str(MODELS / "riclpm_4wave.txt"), "--data", str(data),
                 "--out", str(out)]) == 0
    params = pd.read_csv(out / "parameters.csv", comment="#")
    ar = params[(params.lhs == "WFX2") & (params.rhs == "WFX1")].iloc[0]
    assert abs(ar.estimate - 0.25) < 3 * ar.se + 0.01
    doc = json.loads((out / "fit.json").read_text())
    assert doc["manifest"]["command"] == "fit" and doc["fit"]["df"] == 9
    head = (out / "fit.csv").read_text().splitlines()
    assert any(ln.startswith("# manifest_hash=") for ln in head)


def test_fit_missing_column(tmp_path):
    data = tmp_path / "d.csv"
    pd.DataFrame(np.zeros((5, 2)), columns=["x1", "y1"]).to_csv(data, index=False)
    assert main(["fit", str(MODELS / "riclpm_4wave.txt"), "--data", str(data),
                 "--out", str(tmp_path / "o")]) == 1


def test_diagnose_listwise_and_outputs(tmp_path, caplog, capsys):
    data = _write_data(tmp_path / "d.csv", "M1_Correlation", 2000, seed=3)
    df = pd.read_csv(data)
    df.iloc[0, 0] = np.nan
    df.to_csv(data, index=False)
    out = tmp_path / "diag"
    with caplog.at_level("WARNING"):
        code = main(["diagnose", str(MODELS / "riclpm_4wave.txt"), "--data", str(data),
                     "--out", str(out)])
    assert code == 0
    assert any("1" in r.getMessage() and "row" in r.getMessage() for r in caplog.records)
    for name in ("lm_table.csv", "stage_log.csv", "deltas.csv", "report.json"):
        assert (out / name).exists()
    printed = capsys.readouterr().out.splitlines()
    assert printed and all(" " in ln for ln in printed)


def test_simulate_is_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    args = ["simulate", "M1_Correlation", "--n", "500", "--reps", "10", "--seed", "7", "--raw"]
    assert main(args + ["--out", str(a)]) == 0
    assert main(args + ["--out", str(b)]) == 0
    for name in ("summary.csv", "replications.csv", "scenario.yaml"):
        assert _body(a / name) == _body(b / name)


def test_simulate_calibration_mode(tmp_path, capsys):
    assert main(["simulate", "--scenario", "CLPM_Baseline", "--n", "300", "--reps", "5",
                 "--out", str(tmp_path)]) == 0
    assert "CLPM_Baseline" in capsys.readouterr().out
    row = pd.read_csv(tmp_path / "summary.csv", comment="#").iloc[0]
    assert row["df"] == 12


def test_unknown_inputs(tmp_path):
    assert main(["replicate-table", "T99", "--out", str(tmp_path)]) == 1
    assert main(["simulate", "Nope", "--out", str(tmp_path)]) == 1
    assert main(["simulate", "Baseline4w", "--reps", "0", "--out", str(tmp_path)]) == 1


def test_replicate_table_columns(tmp_path):
    assert main(["replicate-table", "A8", "--n", "200", "--reps", "5",
                 "--out", str(tmp_path)]) == 0
    t = pd.read_csv(tmp_path / "A8.csv", comment="#")
    assert t.loc[0, "reference_chi2"] == pytest.approx(12.640)
    assert "ours_chi2" in t.columns


def test_version(capsys):
    with pytest.raises(SystemExit) as e:
        main(["--version"])
    assert e.value.code == 0
    assert "panelwald" in capsys.readouterr().out
