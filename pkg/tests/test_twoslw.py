import json

import numpy as np
import pytest

from panelwald.dsl import parse_statement
from panelwald.errors import LabelMismatch
from panelwald.estimator import fit
from panelwald.score_wald import LmCandidate, lm_scan
from panelwald.twoslw import (DELTA_COLUMNS, LM_COLUMNS, Reason, TwoSlwConfig, candidate_universe,
                              compare_models, format_csv, lag_parameters, run_2slw, stage_one,
                              stage_two)

from conftest import population_moments, sampled_moments


def _cand(text, lm, epc, rank):
    return LmCandidate(parse_statement(text).as_fixed(0.0), lm, epc, rank)


def _truth_value(name):
    lhs, _, rhs = name.split()
    return 0.25 if lhs[:3] == rhs[:3] else 0.15


@pytest.fixture(scope="module")
def m1_report():
    sc, m = sampled_moments("M1_Correlation", 2000, seed=12)
    return sc, m, run_2slw(sc.analysis_spec, m)


def test_config_validation():
    with pytest.raises(ValueError):
        TwoSlwConfig(top_k=0)
    with pytest.raises(ValueError):
        TwoSlwConfig(alpha=1.0)
    with pytest.raises(ValueError):
        TwoSlwConfig(epc_min=-0.1)


def test_static_filters(baseline):
    sc, m = population_moments("Baseline4w", 1000)
    base = fit(sc.analysis_spec, m)
    table = [
        _cand("WFX1 ~ WFX4", 50.0, 0.5, 1),      # later wave predicting an earlier one
        _cand("WFX4 ~~ y2", 40.0, 0.5, 2),       # y2 has a fixed residual variance
        _cand("WFX4 =~ y2", 30.0, 0.5, 3),       # latent to another latent's indicator
        _cand("WFX4 ~~ WFX2", 20.0, 0.5, 4),     # autoregressive ancestor
        _cand("WFX4 ~~ WFY3", 15.0, 0.5, 5),     # already linked by a cross-lagged path
        _cand("WFX4 ~ WFY2", 12.0, 0.02, 6),     # tiny EPC
        _cand("WFX4 ~~ WFY2", 10.0, 0.3, 7),     # admissible
    ]
    disp = stage_one(sc.analysis_spec, base, table, TwoSlwConfig())
    assert [d.reason for d in disp] == [
        Reason.TEMPORAL_ORDER_VIOLATION, Reason.CONFLICTS_WITH_SPEC,
        Reason.LATENT_TO_OWN_INDICATOR, Reason.REDUNDANT_RELATION, Reason.REDUNDANT_RELATION,
        Reason.SMALL_EPC, None]
    assert all(d.kept == (d.reason is None) for d in disp)


def test_temporal_filter_can_be_disabled(baseline):
    sc, m = population_moments("Baseline4w", 1000)
    base = fit(sc.analysis_spec, m)
    disp = stage_one(sc.analysis_spec, base, [_cand("WFX1 ~ WFY4", 5.0, 0.01, 1)],
                     TwoSlwConfig(enforce_temporal=False))
    assert disp[0].reason is Reason.SMALL_EPC


def test_top_k_partition(m1_report):
    sc, m, rep = m1_report
    assert len(rep.stage_one) == min(25, len(rep.lm_table))
    assert [d.candidate.rank for d in rep.stage_one] == list(range(1, len(rep.stage_one) + 1))
    small = stage_one(sc.analysis_spec, rep.baseline_fit, rep.lm_table, TwoSlwConfig(top_k=3))
    assert len(small) == 3


def test_correlation_model_pipeline(m1_report):
    sc, m, rep = m1_report
    kept = [d for d in rep.stage_one if d.kept]
    assert kept[0].param.key == parse_statement("WFX4 ~~ WFY2").key
    assert rep.stage_two[0].param.key == kept[0].param.key
    retained = rep.retained_keys
    assert {parse_statement(t).key for t in ("WFX4 ~~ WFY2", "WFX2 ~~ WFY4")} <= retained
    assert retained <= {d.param.key for d in kept}
    assert rep.improved_fit.df == rep.baseline_fit.df - len(rep.retained)
    assert rep.improved_fit.T_ml < rep.baseline_fit.T_ml
    for s in rep.stage_two:
        assert not s.retained or (s.p_value < 0.05 and s.veto is None)


def test_temporal_soundness_of_retained(m1_report):
    sc, m, rep = m1_report
    cat = sc.analysis_spec.catalog
    for p in rep.retained:
        if p.op.value == "~":
            assert cat.wave(p.lhs) >= cat.wave(p.rhs)


def test_direct_effect_stage_two():
    sc, m = sampled_moments("M2_DirectEffect", 2000, seed=5)
    rep = run_2slw(sc.analysis_spec, m)
    assert rep.retained_keys == {parse_statement("WFX4 ~ WFX2").key}
    steps = {s.param.key: s for s in rep.stage_two}
    x2 = steps.get(parse_statement("WFX4 ~ x2").key)
    assert x2 is None or not x2.retained


def test_mediation_at_population_moments():
    sc, m = population_moments("M3_Mediation", 2000)
    rep = run_2slw(sc.analysis_spec, m)
    assert rep.retained_keys == {parse_statement(t).key for t in ("WFY4 ~ M", "WFY4 ~ WFY2")}
    assert rep.improved_fit.estimate("WFY4 ~ M") == pytest.approx(0.3, abs=1e-4)


def test_idempotent_on_improved_model():
    sc, m = population_moments("M1_Correlation", 2000)
    rep = run_2slw(sc.analysis_spec, m)
    again = run_2slw(rep.improved_spec, m)
    assert again.retained == []


def test_empty_stage_two(baseline):
    sc, m = population_moments("Baseline4w", 1000)
    base = fit(sc.analysis_spec, m)
    assert stage_two(sc.analysis_spec, m, [], base_fit=base) == []
    rep = run_2slw(sc.analysis_spec, m, baseline_fit=base)
    assert rep.retained == [] and rep.improved_fit is rep.baseline_fit
    assert all(d.diff == 0 for d in rep.coefficient_deltas)


def test_report_is_deterministic():
    sc, m = sampled_moments("M1_Correlation", 1000, seed=9)
    a = run_2slw(sc.analysis_spec, m).to_json()
    b = run_2slw(sc.analysis_spec, m).to_json()
    assert a == b
    doc = json.loads(a)
    assert set(doc) >= {"retained", "lm_table", "stage_two", "coefficient_deltas", "config"}


def test_compare_models_identical_and_mismatch(baseline, baseline_sample):
    res = fit(baseline.analysis_spec, baseline_sample[1])
    cmp = compare_models(res, res, baseline.analysis_spec)
    assert len(cmp.coefficients) == 12
    assert all(d.diff == 0 for d in cmp.coefficients)
    other = fit(baseline.analysis_spec.without(["WFX2 ~ WFY1"]), baseline_sample[1])
    with pytest.raises(LabelMismatch):
        compare_models(res, other, baseline.analysis_spec)


def test_lag_parameters(baseline):
    names = {str(p) for p in lag_parameters(baseline.analysis_spec)}
    assert "WFX2 ~ WFX1" in names and "WFY4 ~ WFX3" in names and len(names) == 12


def test_improvement_moves_lags_toward_truth():
    closer = total = 0
    for rep in range(20):
        sc, m = sampled_moments("M1_Correlation", 2000, seed=21, rep=rep)
        r = run_2slw(sc.analysis_spec, m)
        if not r.retained:
            continue
        before = np.mean([abs(d.before - _truth_value(d.name)) for d in r.coefficient_deltas])
        after = np.mean([abs(d.after - _truth_value(d.name)) for d in r.coefficient_deltas])
        total += 1
        closer += after < before
    assert total and closer / total >= 0.8


def test_between_factors_excluded_from_universe(baseline):
    cands = candidate_universe(baseline.analysis_spec)
    assert not any("BX" in (c.lhs, c.rhs) or "BY" in (c.lhs, c.rhs) for c in cands)


def test_csv_tables(m1_report):
    sc, m, rep = m1_report
    text = format_csv(rep.lm_rows(), LM_COLUMNS, ["seed=1"])
    lines = text.splitlines()
    assert lines[0] == "# seed=1" and lines[1] == ",".join(LM_COLUMNS)
    assert len(lines) == 2 + len(rep.lm_table)
    dispositions = {r["disposition"] for r in rep.lm_rows()}
    assert "BelowTopK" in dispositions and "retained" in dispositions
    deltas = format_csv(rep.delta_rows(), DELTA_COLUMNS).splitlines()
    assert all(len(row.split(",")) == 4 for row in deltas)
    assert all(len(v.split(".")[-1]) == 3 for v in deltas[1].split(",")[1:])
