"""Maximum-likelihood estimation of covariance structure models.

The discrepancy minimised is

    F(theta) = log|Sigma(theta)| - log|S| + tr(S Sigma(theta)^-1) - p

with ``T_ml = n * F_min``.  Optimisation is BFGS with an analytic gradient,
seeded with the inverse expected Hessian so the first step is a scoring step.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dsl import ModelSpec, Op, ParameterSpec, Role
from .errors import (NonPdSampleCovariance, NotPositiveDefinite, SingularSystem,
                     StartValueFailure, DataError)
from .matrices import (ImpliedCovariance, RamState, RamSystem, build_ram,
                       information_from)
from .stats import chi2_sf

log = logging.getLogger(__name__)

# info matrices with reciprocal condition below this are flagged
ILL_CONDITION = 1e-10


class Warn(str, enum.Enum):
    NEGATIVE_VARIANCE = "NegativeVariance"
    NON_PD_IMPLIED = "NonPdImplied"
    MAX_ITER_REACHED = "MaxIterReached"
    ILL_CONDITIONED_H = "IllConditionedH"


@dataclass(frozen=True, eq=False)
class SampleMoments:
    """Sample covariance with divisor n (the ML estimate)."""

    S: np.ndarray
    n: int
    var_names: tuple

    def __post_init__(self):
        S = np.asarray(self.S, dtype=float)
        p = S.shape[0]
        if S.shape != (p, p) or not np.allclose(S, S.T, atol=1e-10 * max(1.0, np.abs(S).max())):
            raise DataError("sample covariance must be a symmetric square matrix")
        if len(self.var_names) != p:
            raise DataError("var_names does not match covariance dimension")
        if self.n < p + 1:
            raise DataError(f"need at least p + 1 = {p + 1} cases, got {self.n}")
        try:
            np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            raise NonPdSampleCovariance("sample covariance is not positive definite") from None
        object.__setattr__(self, "S", 0.5 * (S + S.T))
        object.__setattr__(self, "var_names", tuple(self.var_names))

    @classmethod
    def from_data(cls, data, var_names=None):
        X = np.asarray(data, dtype=float)
        if var_names is None:
            var_names = tuple(getattr(data, "columns", range(X.shape[1])))
        n = X.shape[0]
        if n < X.shape[1] + 1:
            raise DataError(f"need at least p + 1 = {X.shape[1] + 1} cases, got {n}")
        Xc = X - X.mean(axis=0)
        return cls(Xc.T @ Xc / n, n, tuple(var_names))

    @property
    def p(self) -> int:
        return len(self.var_names)

    @property
    def logdet(self) -> float:
        return float(np.linalg.slogdet(self.S)[1])

    def select(self, names) -> "SampleMoments":
        """Moments of ``names`` in the given order."""
        pos = {v: i for i, v in enumerate(self.var_names)}
        missing = [v for v in names if v not in pos]
        if missing:
            from .errors import MissingColumn
            raise MissingColumn(f"variables not in data: {', '.join(missing)}")
        idx = [pos[v] for v in names]
        return SampleMoments(self.S[np.ix_(idx, idx)], self.n, tuple(names))


@dataclass
class FitOptions:
    grad_tol: float = 1e-6
    max_iter: int = 500
    f_rel_tol: float = 1e-10
    start: Optional[dict] = None      # parameter name -> start value
    max_jitter: int = 10


@dataclass(eq=False)
class FitResult:
    spec: ModelSpec
    ram: RamSystem
    theta_hat: np.ndarray
    F_min: float
    T_ml: float
    df: int
    p_value: float
    gradient: np.ndarray
    H: np.ndarray
    std_errors: np.ndarray
    converged: bool
    warnings: frozenset
    n: int
    n_iter: int = 0
    sigma: Optional[ImpliedCovariance] = field(default=None, repr=False)
    moments: Optional[SampleMoments] = field(default=None, repr=False)

    @property
    def param_names(self):
        return self.ram.param_names

    def index(self, key) -> int:
        """Theta index of a parameter given as ParameterSpec, key tuple, statement or name."""
        if isinstance(key, ParameterSpec):
            key = key.key
        if isinstance(key, str):
            if key in self.ram.param_names:
                return self.ram.param_names.index(key)
            from .dsl import parse_statement
            key = parse_statement(key).key
        if key not in self.ram.index_of:
            raise KeyError(f"{key} is not a free parameter of this fit")
        return self.ram.index_of[key]

    def estimate(self, key) -> float:
        return float(self.theta_hat[self.index(key)])

    def se(self, key) -> float:
        return float(self.std_errors[self.index(key)])

    def z(self, key) -> float:
        k = self.index(key)
        return float(self.theta_hat[k] / self.std_errors[k])

    def param_table(self) -> list:
        rows = []
        for k, name in enumerate(self.ram.param_names):
            p = self.ram.param_specs[k][0]
            est = float(self.theta_hat[k])
            se = float(self.std_errors[k])
            z = est / se if se > 0 and math.isfinite(se) else float("nan")
            pval = chi2_sf(z * z, 1) if math.isfinite(z) else float("nan")
            rows.append(dict(name=name, lhs=p.lhs, op=p.op.value, rhs=p.rhs,
                             estimate=est, se=se, z=z, p_value=pval))
        return rows

    def to_dict(self) -> dict:
        return dict(
            model=self.spec.name,
            n=self.n,
            F_min=self.F_min,
            chi2=self.T_ml,
            df=self.df,
            p_value=self.p_value,
            converged=self.converged,
            iterations=self.n_iter,
            warnings=sorted(w.value for w in self.warnings),
            max_abs_gradient=float(np.max(np.abs(self.gradient))) if len(self.gradient) else 0.0,
            parameters=self.param_table(),
        )


@dataclass(frozen=True)
class FitIndices:
    chi2: float
    df: int
    nfi: float
    cfi: float
    tli: float
    rmsea: float

    def to_dict(self):
        return dict(chi2=self.chi2, df=self.df, nfi=self.nfi, cfi=self.cfi,
                    tli=self.tli, rmsea=self.rmsea)


def ml_discrepancy(sigma, S) -> float:
    """ML fit function between an implied and a sample covariance."""
    if not isinstance(sigma, ImpliedCovariance):
        sigma = ImpliedCovariance.from_matrix(np.asarray(sigma, dtype=float))
    S_mat = S.S if isinstance(S, SampleMoments) else np.asarray(S, dtype=float)
    if not sigma.is_pd:
        raise NotPositiveDefinite("Sigma")
    sign, logdet_s = np.linalg.slogdet(S_mat)
    if sign <= 0:
        raise NotPositiveDefinite("S")
    try:
        np.linalg.cholesky(S_mat)
    except np.linalg.LinAlgError:
        raise NotPositiveDefinite("S") from None
    p = len(S_mat)
    return float(sigma.logdet - logdet_s + np.sum(sigma.inverse() * S_mat) - p)


# --------------------------------------------------------------------------
# objective


class _Objective:
    """F and its gradient over theta for fixed sample moments."""

    def __init__(self, ram: RamSystem, moments: SampleMoments):
        self.ram = ram
        self.S = moments.S
        self.logdet_S = moments.logdet
        self.p = moments.p
        self.n_eval = 0

    def state(self, theta):
        """(F, gradient, state, Sigma^-1) or (inf, None, None, None) when inadmissible."""
        self.n_eval += 1
        try:
            st = RamState(self.ram, theta)
        except SingularSystem:
            return math.inf, None, None, None
        try:
            L = np.linalg.cholesky(st.sigma)
        except np.linalg.LinAlgError:
            return math.inf, None, None, None
        Linv = np.linalg.inv(L)
        sigma_inv = Linv.T @ Linv
        logdet = 2.0 * np.sum(np.log(np.diag(L)))
        SiS = sigma_inv @ self.S
        f = logdet - self.logdet_S + np.trace(SiS) - self.p
        W = sigma_inv - SiS @ sigma_inv
        g = st.ml_gradient(0.5 * (W + W.T))
        return float(f), g, st, sigma_inv


def _line_search(obj, theta, f0, g0, d, c1=1e-4, c2=0.9, max_steps=30):
    """Backtracking/expanding search for a step satisfying the Wolfe conditions.

    Returns the best Armijo-acceptable point found, flagged by whether the
    curvature condition also holds, or None when no decrease was found.
    """
    slope = float(g0 @ d)
    alpha = 1.0
    best = None
    lo, hi = 0.0, math.inf
    for _ in range(max_steps):
        trial = theta + alpha * d
        f, g, st, si = obj.state(trial)
        if not math.isfinite(f) or f > f0 + c1 * alpha * slope:
            hi = alpha
            alpha = 0.5 * (lo + hi) if lo > 0 else alpha * 0.5
            continue
        new_slope = float(g @ d)
        best = (alpha, trial, f, g, st, si)
        if new_slope >= c2 * slope:   # curvature satisfied (slope is negative)
            return best + (True,)
        lo = alpha
        if math.isfinite(hi):
            alpha = 0.5 * (lo + hi)
        else:
            alpha *= 2.0
    if best is None:
        return None
    return best + (False,)


def start_values(ram: RamSystem, moments: SampleMoments, overrides=None) -> np.ndarray:
    """Deterministic scale-aware start values."""
    S_diag = dict(zip(moments.var_names, np.diag(moments.S)))
    latent_var = 0.25 * float(np.mean(np.diag(moments.S)))
    theta = np.zeros(ram.n_params)
    for k, group in enumerate(ram.param_specs):
        p = group[0]
        if p.op is Op.LOADING:
            theta[k] = 1.0
        elif p.op is Op.REGRESSION:
            theta[k] = 0.0
        elif p.is_variance:
            theta[k] = 0.5 * S_diag[p.lhs] if p.lhs in S_diag else latent_var
        else:
            theta[k] = 0.0
    for name, value in (overrides or {}).items():
        if name in ram.param_names:
            theta[ram.param_names.index(name)] = value
    return theta


def _information_at(state, sigma_inv):
    return information_from(sigma_inv, state.jacobian())


def _safe_inverse(M):
    """Inverse via symmetric eigendecomposition; flags near-singular matrices."""
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    wmax = max(abs(w).max(), 1e-300) if len(w) else 1.0
    ill = bool(len(w) and w.min() <= ILL_CONDITION * wmax)
    if ill:
        keep = w > ILL_CONDITION * wmax
        winv = np.zeros_like(w)
        winv[keep] = 1.0 / w[keep]
        return (V * winv) @ V.T, True
    return (V / w) @ V.T, False


def _bfgs(obj, theta, opts):
    f, g, st, si = obj.state(theta)
    q = len(theta)
    if q == 0:
        return theta, f, g, st, si, 0, True

    def scoring_inverse(state, sigma_inv):
        Hinv, _ = _safe_inverse(2.0 * _information_at(state, sigma_inv))
        if not np.all(np.isfinite(Hinv)) or np.allclose(Hinv, 0):
            return np.eye(q)
        return Hinv

    Hinv = scoring_inverse(st, si)
    fresh = True
    stall = 0
    it = 0
    for it in range(1, opts.max_iter + 1):
        if np.max(np.abs(g)) < opts.grad_tol:
            return theta, f, g, st, si, it - 1, True
        d = -Hinv @ g
        if g @ d >= 0:
            Hinv = scoring_inverse(st, si)
            fresh = True
            d = -Hinv @ g
            if g @ d >= 0:
                d = -g
        res = _line_search(obj, theta, f, g, d)
        if res is None:
            if fresh:
                break
            Hinv = scoring_inverse(st, si)
            fresh = True
            continue
        alpha, theta_new, f_new, g_new, st_new, si_new, wolfe = res
        s = theta_new - theta
        y = g_new - g
        sy = float(s @ y)
        if abs(f - f_new) <= opts.f_rel_tol * max(abs(f), 1e-12):
            stall += 1
        else:
            stall = 0
        theta, f, g, st, si = theta_new, f_new, g_new, st_new, si_new
        fresh = False
        if sy > 1e-14 * max(1.0, float(s @ s)):
            rho = 1.0 / sy
            Hy = Hinv @ y
            Hinv = (Hinv - rho * (np.outer(s, Hy) + np.outer(Hy, s))
                    + (rho * rho * float(y @ Hy) + rho) * np.outer(s, s))
        if stall >= 5:
            # progress in F has stopped; restart curvature from the scoring matrix
            Hinv = scoring_inverse(st, si)
            fresh = True
            stall = 0
    return theta, f, g, st, si, it, bool(np.max(np.abs(g)) < opts.grad_tol)


def fit(spec: ModelSpec, moments: SampleMoments, opts: FitOptions = None,
        start=None, ram: RamSystem = None) -> FitResult:
    """Minimise the ML discrepancy of ``spec`` against ``moments``.

    ``start`` is an optional full theta vector (warm start); otherwise
    :func:`start_values` are used with ``opts.start`` overrides.  The result
    is returned even when the optimiser does not converge.
    """
    opts = opts or FitOptions()
    ram = ram or build_ram(spec)
    moments = moments.select(ram.observed)
    obj = _Objective(ram, moments)

    if start is not None:
        theta0 = np.asarray(start, dtype=float).copy()
        if not math.isfinite(obj.state(theta0)[0]):
            start = None
    if start is None:
        theta0 = start_values(ram, moments, opts.start)
        var_idx = ram.variance_theta()
        base = theta0.copy()
        for attempt in range(opts.max_jitter + 1):
            if math.isfinite(obj.state(theta0)[0]):
                break
            theta0 = base.copy()
            theta0[var_idx] *= 1.1 ** (attempt + 1)
        else:
            raise StartValueFailure("implied covariance not positive definite at start values")

    theta, f, g, st, si, n_iter, converged = _bfgs(obj, theta0, opts)
    warnings = set()
    if not converged:
        warnings.add(Warn.MAX_ITER_REACHED)

    q = ram.n_params
    p = moments.p
    n = moments.n
    if q:
        H = _information_at(st, si)
        Hinv, ill = _safe_inverse(H)
        if ill:
            warnings.add(Warn.ILL_CONDITIONED_H)
        se = np.sqrt(np.maximum(np.diag(Hinv), 0.0) / n)
        if ill:
            null = np.diag(Hinv) <= 0
            se[null] = math.inf
    else:
        H = np.zeros((0, 0))
        se = np.zeros(0)
    implied = ImpliedCovariance.from_matrix(st.sigma)
    df = p * (p + 1) // 2 - q
    T = n * max(f, 0.0)
    result = FitResult(
        spec=spec, ram=ram, theta_hat=theta, F_min=float(f), T_ml=float(T), df=int(df),
        p_value=chi2_sf(T, df) if df >= 0 else float("nan"),
        gradient=g, H=H, std_errors=se, converged=converged,
        warnings=frozenset(), n=n, n_iter=n_iter, sigma=implied, moments=moments,
    )
    warnings |= heywood_check(result, spec)
    result.warnings = frozenset(warnings)
    return result


def heywood_check(fit: FitResult, spec: ModelSpec = None) -> set:
    """Inadmissible-solution flags: negative variance cells of S, non-PD Sigma."""
    out = set()
    _, S = fit.ram.matrices(fit.theta_hat)
    if np.any(np.diag(S) < 0):
        out.add(Warn.NEGATIVE_VARIANCE)
    if fit.sigma is None or not fit.sigma.is_pd:
        out.add(Warn.NON_PD_IMPLIED)
    return out


def independence_spec(var_names) -> ModelSpec:
    params = [ParameterSpec(v, Op.COVARIANCE, v) for v in var_names]
    return ModelSpec.from_params(params, name="independence")


def fit_independence(moments: SampleMoments, var_names=None) -> FitResult:
    """Baseline model with free variances only, started at its closed-form optimum."""
    names = tuple(var_names or moments.var_names)
    spec = independence_spec(names)
    sub = moments.select(names)
    return fit(spec, sub, start=np.diag(sub.S).copy())


def fit_indices(fit: FitResult, baseline: FitResult) -> FitIndices:
    """NFI, CFI, TLI and RMSEA relative to an independence baseline."""
    Tm, dfm = fit.T_ml, fit.df
    Tb, dfb = baseline.T_ml, baseline.df
    n = fit.n
    nfi = (Tb - Tm) / Tb if Tb > 0 else 1.0
    denom = max(Tb - dfb, Tm - dfm, 0.0)
    cfi = 1.0 - max(Tm - dfm, 0.0) / denom if denom > 0 else 1.0
    if dfm > 0 and dfb > 0 and Tb / dfb != 1.0:
        tli = (Tb / dfb - Tm / dfm) / (Tb / dfb - 1.0)
    else:
        tli = 1.0
    rmsea = math.sqrt(max(Tm - dfm, 0.0) / (dfm * n)) if dfm > 0 else 0.0
    clamp = lambda v: min(max(v, 0.0), 1.0)
    return FitIndices(chi2=Tm, df=dfm, nfi=clamp(nfi), cfi=clamp(cfi), tli=clamp(tli),
                      rmsea=rmsea)
