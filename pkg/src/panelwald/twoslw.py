"""Two-stage LM/Wald search for omitted parameters.

Stage one ranks every admissible fixed parameter by its score statistic,
keeps the ``top_k`` best and filters them; stage two adds the survivors
one at a time and keeps those whose Wald test is significant.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dsl import ModelSpec, Op, ParameterSpec, Role, enumerate_candidates
from .errors import LabelMismatch
from .estimator import (FitIndices, FitOptions, FitResult, SampleMoments, Warn, fit as ml_fit,
                        fit_independence, fit_indices)
from .score_wald import LmCandidate, Veto, WaldStep, fit_with, forward_stepwise_wald, lm_scan

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TwoSlwConfig:
    top_k: int = 25
    epc_min: float = 0.1
    alpha: float = 0.05
    enforce_temporal: bool = True

    def __post_init__(self):
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.epc_min < 0:
            raise ValueError("epc_min must be >= 0")


class Reason(str, enum.Enum):
    TEMPORAL_ORDER_VIOLATION = "TemporalOrderViolation"
    CONFLICTS_WITH_SPEC = "ConflictsWithSpec"
    LATENT_TO_OWN_INDICATOR = "LatentToOwnIndicator"
    REDUNDANT_RELATION = "RedundantRelation"
    SMALL_EPC = "SmallEpc"
    CAUSES_NON_CONVERGENCE = "CausesNonConvergence"
    CAUSES_NON_PD = "CausesNonPd"
    CAUSES_NEGATIVE_VARIANCE = "CausesNegativeVariance"
    BELOW_TOP_K = "BelowTopK"


@dataclass(frozen=True)
class FilterDisposition:
    candidate: LmCandidate
    reason: Optional[Reason] = None

    @property
    def param(self) -> ParameterSpec:
        return self.candidate.param

    @property
    def kept(self) -> bool:
        return self.reason is None


@dataclass(frozen=True)
class CoefficientDelta:
    name: str
    before: float
    after: float

    @property
    def diff(self) -> float:
        return self.after - self.before


@dataclass(frozen=True)
class ModelComparison:
    coefficients: tuple
    fit: dict


@dataclass(eq=False)
class TwoSlwReport:
    config: TwoSlwConfig
    lm_table: list
    stage_one: list
    stage_two: list
    retained: list
    baseline_fit: FitResult
    improved_fit: FitResult
    baseline_indices: FitIndices
    improved_indices: FitIndices
    comparison: ModelComparison
    improved_spec: ModelSpec = None

    @property
    def coefficient_deltas(self) -> tuple:
        return self.comparison.coefficients

    @property
    def retained_keys(self) -> set:
        return {p.key for p in self.retained}

    # -- serialization ---------------------------------------------------

    def lm_rows(self) -> list:
        disp = {d.param.key: d for d in self.stage_one}
        steps = {s.param.key: s for s in self.stage_two}
        rows = []
        for c in self.lm_table:
            d = disp.get(c.param.key)
            s = steps.get(c.param.key)
            if d is None:
                status = Reason.BELOW_TOP_K.value
            elif not d.kept:
                status = d.reason.value
            elif s is not None and s.retained:
                status = "retained"
            else:
                status = "rejected"
            rows.append(dict(rank=c.rank, lhs=c.param.lhs, op=c.param.op.value,
                             rhs=c.param.rhs, lm_chi2=c.lm_chi2, epc=c.epc,
                             wald=s.wald if s else None, p_value=s.p_value if s else None,
                             disposition=status,
                             veto=s.veto.value if s and s.veto else None))
        return rows

    def stage_rows(self) -> list:
        lm = {c.param.key: c for c in self.lm_table}
        rows = []
        for s in self.stage_two:
            c = lm.get(s.param.key)
            rows.append(dict(step=s.step_index + 1, lhs=s.param.lhs, op=s.param.op.value,
                             rhs=s.param.rhs, lm_chi2=c.lm_chi2 if c else None,
                             epc=c.epc if c else None, estimate=s.estimate, se=s.se,
                             wald=s.wald, p_value=s.p_value,
                             disposition="retained" if s.retained else "rejected",
                             veto=s.veto.value if s.veto else None))
        return rows

    def delta_rows(self) -> list:
        return [dict(parameter=d.name, before=d.before, after=d.after, diff=d.diff)
                for d in self.comparison.coefficients]

    def to_dict(self) -> dict:
        return dict(
            config=dict(top_k=self.config.top_k, epc_min=self.config.epc_min,
                        alpha=self.config.alpha, enforce_temporal=self.config.enforce_temporal),
            retained=[str(p.as_free()) for p in self.retained],
            baseline=dict(fit=self.baseline_fit.to_dict(), indices=self.baseline_indices.to_dict()),
            improved=dict(fit=self.improved_fit.to_dict(), indices=self.improved_indices.to_dict(),
                          model=self.improved_spec.to_text() if self.improved_spec else None),
            lm_table=self.lm_rows(),
            stage_two=self.stage_rows(),
            coefficient_deltas=self.delta_rows(),
            fit_deltas=self.comparison.fit,
        )

    def to_json(self, **kw) -> str:
        return json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=False, **kw)


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    return x


def format_csv(rows, columns, header_lines=(), decimals=3) -> str:
    """CSV text with ``# key=value`` comment lines and fixed-decimal floats."""
    buf = io.StringIO()
    for line in header_lines:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        out = []
        for c in columns:
            v = r.get(c)
            if v is None:
                out.append("")
            elif isinstance(v, (float, np.floating)):
                out.append(f"{float(v):.{decimals}f}" if math.isfinite(v) else "nan")
            else:
                out.append(str(v))
        w.writerow(out)
    return buf.getvalue()


LM_COLUMNS = ["rank", "lhs", "op", "rhs", "lm_chi2", "epc", "wald", "p_value", "disposition", "veto"]
STAGE_COLUMNS = ["step", "lhs", "op", "rhs", "lm_chi2", "epc", "estimate", "se", "wald",
                 "p_value", "disposition", "veto"]
DELTA_COLUMNS = ["parameter", "before", "after", "diff"]


# --------------------------------------------------------------------------
# candidate universe and filters


def _between_fixed(spec: ModelSpec) -> set:
    """Between factors whose loadings are all fixed."""
    cat = spec.catalog
    out = set()
    for f in cat.latent:
        if cat.role_of[f] is not Role.BETWEEN_FACTOR:
            continue
        loads = [p for p in spec.params if p.op is Op.LOADING and p.lhs == f]
        if loads and all(not p.free for p in loads):
            out.add(f)
    return out


def candidate_universe(spec: ModelSpec) -> list:
    """Admissible candidates, excluding any touching a fixed-loading between factor."""
    excluded = _between_fixed(spec)
    # factors measured only by between factors (higher-order) are excluded too
    for p in spec.params:
        if p.op is Op.LOADING and p.rhs in excluded:
            excluded.add(p.lhs)
    return [c for c in enumerate_candidates(spec)
            if c.lhs not in excluded and c.rhs not in excluded]


def _own_indicators(spec: ModelSpec) -> dict:
    out = {}
    for p in spec.params:
        if p.op is Op.LOADING:
            out.setdefault(p.lhs, set()).add(p.rhs)
    return out


def _ancestors(spec: ModelSpec) -> dict:
    """Directed reachability over regression paths (loadings excluded)."""
    parents = {}
    for p in spec.params:
        if p.op is Op.REGRESSION and (p.free or p.value != 0):
            parents.setdefault(p.lhs, set()).add(p.rhs)
    memo = {}

    def anc(v, stack=()):
        if v in memo:
            return memo[v]
        out = set()
        for u in parents.get(v, ()):
            if u in stack:
                continue
            out.add(u)
            out |= anc(u, stack + (v,))
        memo[v] = out
        return out

    return {v: anc(v) for v in spec.catalog.variables}


def _static_reason(p: ParameterSpec, spec: ModelSpec, cfg: TwoSlwConfig, ctx) -> Optional[Reason]:
    cat = spec.catalog
    fixed_var, own, anc, free_cells = ctx
    # (i) temporal ordering, conflicts, latent/indicator links
    if cfg.enforce_temporal and p.op is Op.REGRESSION:
        wl, wr = cat.wave(p.lhs), cat.wave(p.rhs)
        if wl is not None and wr is not None and wr > wl:
            return Reason.TEMPORAL_ORDER_VIOLATION
    if p.op is Op.COVARIANCE and (p.lhs in fixed_var or p.rhs in fixed_var):
        return Reason.CONFLICTS_WITH_SPEC
    if p.op is Op.LOADING:
        return Reason.LATENT_TO_OWN_INDICATOR
    if p.rhs in own.get(p.lhs, ()) or p.lhs in own.get(p.rhs, ()):
        return Reason.LATENT_TO_OWN_INDICATOR
    # (ii) redundancy
    if p.lhs == p.rhs or p.cell() in free_cells:
        return Reason.REDUNDANT_RELATION
    if p.op is Op.COVARIANCE:
        # covariance alongside a direct path, or along an autoregressive chain
        if _linked(p.lhs, p.rhs, free_cells):
            return Reason.REDUNDANT_RELATION
        if cat.stem(p.lhs) == cat.stem(p.rhs) \
                and (p.lhs in anc.get(p.rhs, ()) or p.rhs in anc.get(p.lhs, ())):
            return Reason.REDUNDANT_RELATION
    if p.op is Op.REGRESSION:
        # regressing on an indicator repeats any path or covariance already
        # linking lhs to that indicator's factor
        for f, inds in own.items():
            if p.rhs in inds and f != p.lhs and _linked(p.lhs, f, free_cells):
                return Reason.REDUNDANT_RELATION
    return None


def _linked(a, b, free_cells) -> bool:
    return (("A", a, b) in free_cells or ("A", b, a) in free_cells
            or ("S",) + tuple(sorted((a, b))) in free_cells)


_VETO_REASON = {
    Veto.NO_CONVERGENCE: Reason.CAUSES_NON_CONVERGENCE,
    Veto.NON_PD_IMPLIED: Reason.CAUSES_NON_PD,
    Veto.NEGATIVE_VARIANCE: Reason.CAUSES_NEGATIVE_VARIANCE,
}


def _trial_reason(fit: Optional[FitResult]) -> Optional[Reason]:
    if fit is None or not fit.converged or Warn.ILL_CONDITIONED_H in fit.warnings:
        return Reason.CAUSES_NON_CONVERGENCE
    if Warn.NON_PD_IMPLIED in fit.warnings:
        return Reason.CAUSES_NON_PD
    if Warn.NEGATIVE_VARIANCE in fit.warnings:
        return Reason.CAUSES_NEGATIVE_VARIANCE
    return None


def stage_one(spec: ModelSpec, fit: FitResult, lm_table, cfg: TwoSlwConfig = None,
              opts: FitOptions = None) -> list:
    """Filter the ``top_k`` candidates; one disposition per candidate, in rank order."""
    cfg = cfg or TwoSlwConfig()
    top = sorted(lm_table, key=lambda c: c.rank)[: cfg.top_k]
    fixed_var = {p.lhs for p in spec.params if p.is_variance and not p.free}
    free_cells = {p.cell() for p in spec.params if p.free}
    ctx = (fixed_var, _own_indicators(spec), _ancestors(spec), free_cells)
    out = []
    for c in top:
        reason = _static_reason(c.param, spec, cfg, ctx)
        if reason is None and abs(c.epc) < cfg.epc_min:
            reason = Reason.SMALL_EPC
        if reason is None:
            _, trial = fit_with(spec, fit.moments, fit, c.param, c.epc, opts)
            reason = _trial_reason(trial)
        out.append(FilterDisposition(c, reason))
    return out


def stage_two(spec: ModelSpec, S: SampleMoments, kept, cfg: TwoSlwConfig = None,
              base_fit: FitResult = None, opts: FitOptions = None) -> list:
    cfg = cfg or TwoSlwConfig()
    cands = [d.candidate if isinstance(d, FilterDisposition) else d for d in kept
             if not isinstance(d, FilterDisposition) or d.kept]
    return forward_stepwise_wald(spec, S, cands, cfg.alpha, base_fit=base_fit, opts=opts)


# --------------------------------------------------------------------------
# comparison


def lag_parameters(spec: ModelSpec) -> list:
    """Names of free regressions between consecutive waves (AR and CL paths)."""
    cat = spec.catalog
    out = []
    for p in spec.params:
        if p.op is not Op.REGRESSION or not p.free:
            continue
        wl, wr = cat.wave(p.lhs), cat.wave(p.rhs)
        if wl is not None and wr is not None and wl == wr + 1:
            out.append(p)
    return out


def compare_models(baseline: FitResult, improved: FitResult, spec: ModelSpec,
                   baseline_indices: FitIndices = None,
                   improved_indices: FitIndices = None) -> ModelComparison:
    """Lag-coefficient and fit-statistic changes from ``baseline`` to ``improved``."""
    deltas = []
    for p in lag_parameters(spec):
        try:
            before = baseline.estimate(p)
            after = improved.estimate(p)
        except KeyError:
            raise LabelMismatch(f"{p} is missing from one of the fits") from None
        deltas.append(CoefficientDelta(str(p), before, after))
    fit = dict(chi2=improved.T_ml - baseline.T_ml, df=improved.df - baseline.df)
    if baseline_indices is not None and improved_indices is not None:
        for k in ("cfi", "nfi", "tli", "rmsea"):
            fit[k] = getattr(improved_indices, k) - getattr(baseline_indices, k)
    return ModelComparison(tuple(deltas), fit)


# --------------------------------------------------------------------------
# pipeline


def run_2slw(spec: ModelSpec, data, cfg: TwoSlwConfig = None, opts: FitOptions = None,
             baseline_fit: FitResult = None) -> TwoSlwReport:
    """Full pipeline: fit, score scan, filtering, stepwise Wald, refit and comparison.

    ``data`` is a :class:`SampleMoments` or an n x p array/DataFrame whose
    columns name the observed variables.
    """
    cfg = cfg or TwoSlwConfig()
    if isinstance(data, SampleMoments):
        moments = data
    else:
        moments = SampleMoments.from_data(data)
    base = baseline_fit or ml_fit(spec, moments, opts)
    lm_table = lm_scan(spec, base, candidate_universe(spec))
    disp = stage_one(spec, base, lm_table, cfg, opts)
    steps = stage_two(spec, base.moments, disp, cfg, base_fit=base, opts=opts)
    retained = [s.param for s in steps if s.retained]
    improved = base
    improved_spec = spec
    for s in steps:
        if s.retained:
            improved = s.fit
    if retained:
        improved_spec = spec.with_params([p.as_free() for p in retained],
                                         name=f"{spec.name}_improved")
    null = fit_independence(base.moments)
    bi = fit_indices(base, null)
    ii = fit_indices(improved, null)
    comp = compare_models(base, improved, spec, bi, ii)
    return TwoSlwReport(cfg, lm_table, disp, steps, retained, base, improved, bi, ii, comp,
                        improved_spec)
