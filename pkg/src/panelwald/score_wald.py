"""Score (LM) tests for fixed parameters and Wald tests for free ones.

For a candidate c fixed at zero, with ``g`` the gradient of the ML
discrepancy and ``I`` the per-case expected information at the constrained
estimate,

    v    = I_cc - I_ct I_tt^-1 I_tc
    LM   = n g_c^2 / (4 v)
    EPC  = -g_c / (2 v)

The Wald statistic of a free parameter is ``(theta_j / SE_j)^2``.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dsl import ModelSpec, ParameterSpec, _OP_ORDER
from .errors import (DuplicateParameter, NonFiniteParameter, NotPositiveDefinite,
                     SingularSystem, StartValueFailure)
from .estimator import FitOptions, FitResult, SampleMoments, Warn, fit as ml_fit
from .matrices import RamState, build_ram
from .stats import chi2_sf

log = logging.getLogger(__name__)

# relative size of the projected score variance below which a candidate is
# treated as already spanned by the free parameters
SINGULAR_REL = 1e-9


@dataclass(frozen=True)
class LmCandidate:
    param: ParameterSpec
    lm_chi2: float
    epc: float
    rank: int = 0

    @property
    def p_value(self) -> float:
        return chi2_sf(self.lm_chi2, 1)


class Veto(str, enum.Enum):
    NO_CONVERGENCE = "NoConvergence"
    NON_PD_IMPLIED = "NonPdImplied"
    NEGATIVE_VARIANCE = "NegativeVariance"


@dataclass(frozen=True, eq=False)
class WaldStep:
    param: ParameterSpec
    wald: float
    p_value: float
    retained: bool
    step_index: int
    veto: Optional[Veto] = None
    fit: Optional[FitResult] = None
    estimate: float = float("nan")
    se: float = float("nan")


def _sort_key(c: LmCandidate):
    p = c.param
    return (-c.lm_chi2, -abs(c.epc), p.lhs, _OP_ORDER[p.op], p.rhs)


def lm_scan(spec: ModelSpec, fit: FitResult, candidates) -> list:
    """Univariate score statistics for ``candidates`` at the fitted model.

    Candidates whose matrix cell is already bound, or whose projected score
    variance is numerically zero, are skipped and logged.
    """
    candidates = list(candidates)
    if not candidates:
        return []
    ram = fit.ram
    used = {}
    for k, group in enumerate(ram.param_specs):
        for p in group:
            used[p.cell()] = k
    fixed_cells = {p.cell() for p in spec.params if not p.free}
    usable = []
    for c in candidates:
        if c.cell() in used or c.cell() in fixed_cells:
            log.info("candidate %s skipped: cell already in the model", c)
            continue
        usable.append(c)
    if not usable:
        return []
    ext = build_ram(spec, extra=usable)
    q = ram.n_params
    theta = np.concatenate([fit.theta_hat, np.zeros(len(usable))])
    state = RamState(ext, theta)
    sigma_inv = fit.sigma.inverse()
    S = fit.moments.S
    W = sigma_inv - sigma_inv @ S @ sigma_inv
    g = state.ml_gradient(0.5 * (W + W.T))
    jac = state.jacobian()
    M = np.einsum("ab,kbc->kac", sigma_inv, jac).reshape(len(jac), -1)
    Mt = np.einsum("ab,kbc->kca", sigma_inv, jac).reshape(len(jac), -1)
    # only the rows/cols touching candidates are needed
    I_ct = 0.5 * M[q:] @ Mt[:q].T
    I_cc = 0.5 * np.einsum("ij,ij->i", M[q:], Mt[q:])
    I_tt = 0.5 * M[:q] @ Mt[:q].T
    I_tt = 0.5 * (I_tt + I_tt.T)
    if q:
        w, V = np.linalg.eigh(I_tt)
        keep = w > 1e-12 * max(w.max(), 1e-300)
        proj = (I_ct @ V[:, keep]) ** 2 / w[keep]
        v = I_cc - proj.sum(axis=1)
    else:
        v = I_cc
    n = fit.n
    out = []
    for j, c in enumerate(usable):
        gc = g[q + j]
        if not (v[j] > SINGULAR_REL * max(I_cc[j], 1e-300)) or not math.isfinite(gc):
            log.info("candidate %s skipped: singular score variance", c)
            continue
        lm = n * gc * gc / (4.0 * v[j])
        epc = -gc / (2.0 * v[j])
        if math.isfinite(lm) and math.isfinite(epc):
            out.append(LmCandidate(c, float(max(lm, 0.0)), float(epc)))
    out.sort(key=_sort_key)
    return [LmCandidate(c.param, c.lm_chi2, c.epc, i + 1) for i, c in enumerate(out)]


def epc_of(candidate: LmCandidate) -> float:
    return candidate.epc


def _veto_of(fit: FitResult) -> Optional[Veto]:
    if not fit.converged or Warn.ILL_CONDITIONED_H in fit.warnings:
        return Veto.NO_CONVERGENCE
    if Warn.NON_PD_IMPLIED in fit.warnings:
        return Veto.NON_PD_IMPLIED
    if Warn.NEGATIVE_VARIANCE in fit.warnings:
        return Veto.NEGATIVE_VARIANCE
    return None


def wald_of(spec: ModelSpec, fit: FitResult, param, alpha: float = 0.05,
            step_index: int = 0) -> WaldStep:
    """Wald test of a free parameter of ``fit``; inadmissible fits become vetoes."""
    if isinstance(param, ParameterSpec):
        key = param.as_free()
    else:
        key = param
    try:
        k = fit.index(key)
    except KeyError:
        return WaldStep(param, 0.0, 1.0, False, step_index, Veto.NO_CONVERGENCE, fit)
    est = float(fit.theta_hat[k])
    se = float(fit.std_errors[k])
    if se > 0 and math.isfinite(se):
        w = (est / se) ** 2
    else:
        w = 0.0
    p = chi2_sf(w, 1) if w > 0 else 1.0
    veto = _veto_of(fit)
    retained = veto is None and p < alpha
    return WaldStep(param, float(w), float(p), retained, step_index, veto, fit, est, se)


def warm_start(ram, previous: FitResult, extra: dict = None) -> np.ndarray:
    """Start vector for ``ram`` taken from a previous fit by parameter name."""
    old = previous.ram.values(previous.theta_hat)
    extra = extra or {}
    theta = np.zeros(ram.n_params)
    missing = False
    for k, name in enumerate(ram.param_names):
        if name in extra:
            theta[k] = extra[name]
        elif name in old:
            theta[k] = old[name]
        else:
            missing = True
    return None if missing else theta


def _param_name(p: ParameterSpec) -> str:
    return p.label if p.label else f"{p.lhs}{p.op.value}{p.rhs}"


def fit_with(spec: ModelSpec, moments: SampleMoments, previous: FitResult, param: ParameterSpec,
             start_value: float, opts: FitOptions = None):
    """Free ``param`` in ``spec`` and refit, warm-started from ``previous``.

    Returns ``(new_spec, fit)``; ``fit`` is None when the enlarged model
    cannot be built or started.
    """
    free = param.as_free()
    try:
        new_spec = spec.with_params([free])
        ram = build_ram(new_spec)
    except (DuplicateParameter, ValueError):
        return spec, None
    start = warm_start(ram, previous, {_param_name(free): start_value})
    try:
        res = ml_fit(new_spec, moments, opts, start=start, ram=ram)
    except (StartValueFailure, SingularSystem, NonFiniteParameter, NotPositiveDefinite):
        return new_spec, None
    return new_spec, res


def forward_stepwise_wald(spec: ModelSpec, S: SampleMoments, survivors, alpha: float = 0.05,
                          base_fit: FitResult = None, epcs: dict = None,
                          opts: FitOptions = None) -> list:
    """Add survivors one at a time, keeping those with Wald p < alpha.

    Each candidate is added to the currently retained model and the model is
    refit from the previous estimates with the candidate at its EPC.
    """
    steps = []
    if not survivors:
        return steps
    epcs = epcs or {}
    current_spec = spec
    current_fit = base_fit or ml_fit(spec, S, opts)
    for i, cand in enumerate(survivors):
        param = cand.param if isinstance(cand, LmCandidate) else cand
        start = cand.epc if isinstance(cand, LmCandidate) else epcs.get(param.key, 0.0)
        new_spec, res = fit_with(current_spec, S, current_fit, param, start, opts)
        if res is None:
            steps.append(WaldStep(param, 0.0, 1.0, False, i, Veto.NO_CONVERGENCE))
            continue
        step = wald_of(new_spec, res, param, alpha, i)
        steps.append(step)
        if step.retained:
            current_spec, current_fit = new_spec, res
    return steps
