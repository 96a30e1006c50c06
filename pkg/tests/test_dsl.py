import pytest
from hypothesis import given, settings, strategies as st

from panelwald.dsl import (ModelSource, Op, ParameterSpec, Role, candidate_bound,
                           enumerate_candidates, format_model, parse_model, parse_statement)
from panelwald.errors import DuplicateParameter, ModelSyntaxError
from panelwald.simulator import get_scenario


def test_fixed_loading_statement():
    spec = parse_model("WFX1 =~ 1*x1")
    (p,) = spec.params
    assert (p.lhs, p.op, p.rhs, p.value) == ("WFX1", Op.LOADING, "x1", 1.0)
    assert spec.catalog.latent == ("WFX1",)
    assert spec.catalog.observed == ("x1",)
    assert spec.catalog.role_of["x1"] is Role.INDICATOR


def test_multi_term_regression():
    spec = parse_model("WFX2 ~ WFX1 + WFY1")
    assert [p.key for p in spec.params] == [("WFX2", "~", "WFX1"), ("WFX2", "~", "WFY1")]
    assert all(p.free for p in spec.params)


def test_covariance_canonicalised_duplicate():
    with pytest.raises(DuplicateParameter):
        parse_model("x1 ~~ y1\ny1 ~~ x1")


def test_comments_labels_and_intercepts():
    spec = parse_model("# header\nF =~ 1*a1 + lam*a2  # trailing\nF ~~ F\na1 ~ 1\n")
    p = spec.find(("F", "=~", "a2"))
    assert p.free and p.label == "lam"
    assert spec.find(("a1", "~1", "1")).op is Op.INTERCEPT


@pytest.mark.parametrize("text,line,col", [
    ("x ~~ ", 1, 4),
    ("x1 ~~ y1\nx2 => y2", 2, None),
    ("x1 ~ 2*", 1, None),
])
def test_syntax_errors_carry_position(text, line, col):
    with pytest.raises(ModelSyntaxError) as exc:
        parse_model(text)
    assert exc.value.line == line
    if col is not None:
        assert exc.value.col >= 1


def test_empty_model_rejected():
    with pytest.raises(ModelSyntaxError):
        parse_model("  # only a comment\n\n")


def test_wave_from_name_and_override():
    spec = parse_model("@wave: M=3\nM ~ x1\nWFX2 ~ WFX1\n")
    cat = spec.catalog
    assert cat.wave("M") == 3 and cat.wave("WFX2") == 2 and cat.wave("x1") == 1


def test_parse_is_deterministic():
    text = get_scenario("M3_Mediation").analysis_spec.to_text()
    assert parse_model(text) == parse_model(text)


@pytest.mark.parametrize("name", ["Baseline4w", "Baseline5w2i", "CLPM_Med"])
def test_round_trip_fixpoint(name):
    spec = get_scenario(name).analysis_spec
    once = parse_model(format_model(spec))
    twice = parse_model(format_model(once))
    assert format_model(once) == format_model(twice)
    assert once.params == spec.params


def test_baseline_candidates_include_flagged_parameters(baseline):
    cands = enumerate_candidates(baseline.analysis_spec)
    keys = {p.key for p in cands}
    assert ("WFX4", "~~", "WFY2") in keys
    assert ("WFX4", "~", "WFY2") in keys
    free = {p.key for p in baseline.analysis_spec.free_params}
    assert not keys & free
    assert all(p.value == 0.0 for p in cands)
    assert cands == sorted(cands, key=lambda p: (p.lhs, {"=~": 0, "~": 1, "~~": 2}[p.op.value], p.rhs))


def test_two_variable_enumeration():
    spec = parse_model("x ~~ y")
    keys = sorted(p.key for p in enumerate_candidates(spec))
    assert keys == [("x", "~", "y"), ("y", "~", "x")]


def test_saturated_covariance_model_has_no_covariance_candidates():
    spec = parse_model("a ~~ b\na ~~ c\nb ~~ c\na ~~ a\nb ~~ b\nc ~~ c")
    assert all(p.op is Op.REGRESSION for p in enumerate_candidates(spec))


_names = st.sampled_from(["F1", "F2", "G3", "x1", "x2", "y1", "y2", "z3"])


@st.composite
def random_specs(draw):
    lat = ["F1", "F2", "G3"]
    obs = ["x1", "x2", "y1", "y2", "z3"]
    stmts = set()
    for f in lat:
        stmts.add(f"{f} =~ 1*{draw(st.sampled_from(obs))}")
    for _ in range(draw(st.integers(0, 8))):
        a, b = draw(_names), draw(_names)
        if a == b:
            continue
        op = draw(st.sampled_from(["~", "~~"]))
        if op == "~~":
            a, b = sorted((a, b))
        stmts.add(f"{a} {op} {b}")
    lines = sorted(stmts)
    seen, keep = set(), []
    for s in lines:
        key = parse_statement(s).cell()
        if key not in seen:
            seen.add(key)
            keep.append(s)
    return parse_model("\n".join(keep))


@settings(max_examples=60, deadline=None)
@given(random_specs())
def test_candidate_properties(spec):
    cands = enumerate_candidates(spec)
    free = {p.key for p in spec.free_params}
    assert not free & {p.key for p in cands}
    assert len(cands) <= candidate_bound(spec)
    assert len({p.cell() for p in cands}) == len(cands)
    assert parse_model(format_model(spec)).params == spec.params
