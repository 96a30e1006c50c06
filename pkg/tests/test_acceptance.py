"""Acceptance criteria with one PASS/FAIL line each.

The report lines are printed in the pytest terminal summary.
"""
import sys
from pathlib import Path

import numpy as np
import pytest

from panelwald.cli import main as cli_main
from panelwald.dsl import parse_statement
from panelwald.estimator import SampleMoments, _Objective, fit
from panelwald.matrices import (fisher_information, identification_check, implied_sigma_closed_form,
                                implied_sigma_ram)
from panelwald.score_wald import fit_with, lm_scan, wald_of
from panelwald.simulator import (SimulationConfig, _scenario, population_theta, run_calibration,
                                 run_detection, scenario_library)
from panelwald.templates import single_indicator_riclpm
from panelwald.twoslw import candidate_universe

sys.path.insert(0, str(Path(__file__).parent))
from conftest import population_moments, sampled_moments  # noqa: E402
from oracles import central_difference, random_riclpm  # noqa: E402

RESULTS = {}


def report(num, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {num:2d}: {title}: {detail}"
    RESULTS[num] = line
    assert ok, line


def _calibration(num, title, scenario, reps, chi2_range, rej_range, sd_range=None, rmsea_max=None):
    s = run_calibration(scenario, SimulationConfig(n=10_000, reps=reps, seed=num))
    ok = chi2_range[0] <= s.mean_chi2 <= chi2_range[1] and rej_range[0] <= s.rejection_rate <= rej_range[1]
    detail = f"mean chi2 {s.mean_chi2:.3f}, rejection {s.rejection_rate:.3f}"
    if sd_range:
        ok &= sd_range[0] <= s.sd_chi2 <= sd_range[1]
        detail += f", SD {s.sd_chi2:.3f}"
    if rmsea_max is not None:
        ok &= s.mean_rmsea < rmsea_max
        detail += f", RMSEA {s.mean_rmsea:.4f}"
    report(num, title, ok and s.n_ok == reps, detail + f" ({s.n_ok}/{reps} converged)")


def test_c01_calibration_baseline():
    _calibration(1, "Baseline4w calibration", "Baseline4w", 500, (8.5, 9.5), (0.03, 0.07),
                 sd_range=(3.8, 4.7), rmsea_max=0.02)


def test_c02_calibration_two_indicator():
    _calibration(2, "Baseline5w2i calibration", "Baseline5w2i", 200, (165, 175), (0.03, 0.08))


def test_c03_calibration_clpm():
    _calibration(3, "CLPM_Baseline calibration", "CLPM_Baseline", 500, (11.4, 12.6), (0.02, 0.07))


def test_c04_detection_main_models():
    parts, ok = [], True
    for name in ("M1_Correlation", "M2_DirectEffect", "M3_Mediation"):
        s = run_detection(name, SimulationConfig(n=2000, reps=200, seed=4))
        ok &= min(s.detection_rate.values()) >= 0.8 and s.false_positive_rate <= 0.5
        rates = ", ".join(f"{k} {v:.2f}" for k, v in s.detection_rate.items())
        parts.append(f"{name}: {rates}, FP {s.false_positive_rate:.2f}")
        if name == "M3_Mediation":
            d = s.distractor_rate["WFY4 ~ y2"]
            ok &= d < 0.3
            parts.append(f"distractor WFY4 ~ y2 {d:.2f}")
    report(4, "detection in M1/M2/M3", ok, "; ".join(parts))


def test_c05_detection_variants():
    parts, ok = [], True
    for name, key in (("FiveWave_Corr", "WFX4 ~~ WFY2"), ("CLPM_Corr", "X4 ~~ Y2")):
        s = run_detection(name, SimulationConfig(n=2000, reps=200, seed=5))
        ok &= s.detection_rate[key] >= 0.8
        parts.append(f"{name} {key} {s.detection_rate[key]:.2f}")
    report(5, "detection in appendix variants", ok, "; ".join(parts))


def test_c06_oracle_equivalence():
    rng = np.random.default_rng(6)
    worst_sigma = 0.0
    for _ in range(100):
        ram, theta, cf = random_riclpm(rng, int(rng.integers(2, 7)))
        a = implied_sigma_ram(ram, theta).sigma
        b = implied_sigma_closed_form(cf).sigma
        worst_sigma = max(worst_sigma, np.max(np.abs(a - b)))
    worst_grad = 0.0
    for _ in range(50):
        ram, theta, _ = random_riclpm(rng, int(rng.integers(2, 5)))
        p = ram.n_observed
        X = rng.normal(size=(3 * p, p))
        obj = _Objective(ram, SampleMoments(X.T @ X / len(X) + 0.2 * np.eye(p), 3 * p, ram.observed))
        g = obj.state(theta)[1]
        num = central_difference(lambda t: obj.state(t)[0], theta)
        worst_grad = max(worst_grad, np.max(np.abs(g - num)) / max(1.0, np.max(np.abs(g))))
    report(6, "RAM vs closed form and gradient", worst_sigma < 1e-10 and worst_grad < 1e-6,
           f"max |dSigma| {worst_sigma:.2e}, max gradient rel err {worst_grad:.2e}")


def test_c07_statistic_triangle():
    sc, m = population_moments("M2_DirectEffect", 5000)
    spec = sc.analysis_spec
    base = fit(spec, m)
    truth = parse_statement("WFX4 ~ WFX2")
    cand = {c.param.key: c for c in lm_scan(spec, base, candidate_universe(spec))}[truth.key]
    new_spec, res = fit_with(spec, m, base, cand.param, cand.epc)
    delta = base.T_ml - res.T_ml
    w = wald_of(new_spec, res, truth.as_free()).wald
    e_lm, e_w = abs(cand.lm_chi2 - delta) / delta, abs(w - delta) / delta
    report(7, "LM / LR / Wald agreement on M2", e_lm < 0.15 and e_w < 0.15,
           f"LM {cand.lm_chi2:.2f}, LR {delta:.2f}, Wald {w:.2f} "
           f"(rel {e_lm:.3f}, {e_w:.3f})")


def test_c08_wald_equals_squared_z():
    worst, count = 0.0, 0
    for sc in scenario_library():
        _, m = sampled_moments(sc.name, 2000, seed=8)
        res = fit(sc.analysis_spec, m)
        if not res.converged:
            continue
        for row in res.param_table():
            w = wald_of(sc.analysis_spec, res, row["name"]).wald
            worst = max(worst, abs(w - row["z"] ** 2) / max(row["z"] ** 2, 1e-300))
            count += 1
    report(8, "Wald equals squared z", worst < 1e-8,
           f"{count} parameters over {len(scenario_library())} scenarios, max rel err {worst:.1e}")


def test_c09_weak_loadings_and_near_collinearity():
    info = {}
    for lam in (0.1, 1.0):
        ram, theta = population_theta(_scenario("s", single_indicator_riclpm(3, lam, lam)))
        k = ram.param_names.index("WFX2~WFY1")
        info[lam] = fisher_information(ram, theta)[k, k]
    ratio = info[0.1] / info[1.0]
    s = single_indicator_riclpm(3, 1.0, 1.0, resid=1e-8, within_var=1e-8)
    rep = identification_check(*population_theta(_scenario("s", s)))
    report(9, "information shrinkage and conditioning", 3e-5 <= ratio <= 3e-3 and rep.condition > 1e6,
           f"information ratio {ratio:.2e}, condition {rep.condition:.2e}")


def test_c10_parameter_recovery():
    sc, m = sampled_moments("Baseline4w", 10_000, seed=10)
    res = fit(sc.analysis_spec, m)
    worst, ok = 0.0, res.converged
    for p in sc.analysis_spec.free_params:
        if p.op.value == "~":
            truth = 0.25 if p.lhs[-2] == p.rhs[-2] else 0.15
            z = abs(res.estimate(p) - truth) / res.se(p)
            worst = max(worst, z)
            ok &= z < 3
    report(10, "AR/CL recovery", ok, f"max |estimate - truth| / SE = {worst:.2f}")


def test_c11_null_control():
    s = run_detection("Baseline4w", SimulationConfig(n=1000, reps=200, seed=11), truth=[])
    ok_reps = [r for r in s.replications if r["ok"]]
    empty = sum(not r["retained"] for r in ok_reps) / len(ok_reps)
    report(11, "null control", empty >= 0.85,
           f"empty retained set in {empty:.3f} of {len(ok_reps)} reps "
           f"(FP per rep {s.false_positive_rate:.2f})")


def test_c12_cli_determinism(tmp_path, capsys):
    args = ["simulate", "M1_Correlation", "--n", "500", "--reps", "50", "--seed", "7"]
    bodies = []
    for d in ("a", "b"):
        assert cli_main(args + ["--out", str(tmp_path / d)]) == 0
        text = (tmp_path / d / "summary.csv").read_text().splitlines()
        bodies.append([ln for ln in text if not ln.startswith("# generated_at")])
    report(12, "simulate determinism", bodies[0] == bodies[1],
           f"{len(bodies[0])} summary lines compared")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
