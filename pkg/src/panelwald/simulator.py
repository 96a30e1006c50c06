"""Population scenarios, Gaussian data generation and the Monte Carlo harness.

Every replication draws from its own counter-based Philox stream keyed by
``(seed, replication)``, so results do not depend on execution order or on
how replications are spread over worker processes.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import yaml

from .dsl import ModelSpec, ParameterSpec, parse_model, parse_statement
from .errors import (NotPositiveDefinite, PanelWaldError, SimulationAborted, UnknownScenario)
from .estimator import (FitOptions, SampleMoments, fit as ml_fit, fit_independence, fit_indices)
from .matrices import ImpliedCovariance, build_ram, identification_check, implied_sigma_ram
from .templates import Structure, clpm, riclpm, riclpm_two_indicator

log = logging.getLogger(__name__)

MAX_FAIL_FRACTION = 0.10


# --------------------------------------------------------------------------
# scenarios


@dataclass(frozen=True, eq=False)
class PopulationScenario:
    name: str
    population_spec: ModelSpec
    analysis_spec: ModelSpec
    truth: tuple = ()
    distractors: tuple = ()
    description: str = ""

    @property
    def population_ram(self):
        return build_ram(self.population_spec)

    def sigma(self) -> ImpliedCovariance:
        """Population covariance ordered like the analysis model's observed variables."""
        ram = self.population_ram
        if ram.n_params:
            raise ValueError(f"population model of {self.name} has free parameters")
        sig = implied_sigma_ram(ram, np.zeros(0)).sigma
        pos = {v: i for i, v in enumerate(ram.observed)}
        idx = [pos[v] for v in self.analysis_spec.catalog.observed]
        return ImpliedCovariance.from_matrix(sig[np.ix_(idx, idx)])

    @property
    def var_names(self) -> tuple:
        return self.analysis_spec.catalog.observed

    @property
    def truth_keys(self) -> tuple:
        return tuple(p.key for p in self.truth)

    def to_manifest(self) -> dict:
        return dict(
            name=self.name,
            description=self.description,
            truth=[_stmt(p) for p in self.truth],
            distractors=[_stmt(p) for p in self.distractors],
            analysis_model=self.analysis_spec.to_text(),
            population_model=self.population_spec.to_text(),
        )

    @classmethod
    def from_manifest(cls, doc: dict) -> "PopulationScenario":
        name = doc["name"]
        analysis = parse_model(doc["analysis_model"])
        population = parse_model(doc["population_model"])
        return cls(
            name=name,
            population_spec=ModelSpec(population.params, population.catalog, f"{name}_population",
                                      population.wave_overrides),
            analysis_spec=ModelSpec(analysis.params, analysis.catalog, name,
                                    analysis.wave_overrides),
            truth=tuple(_candidate(s) for s in doc.get("truth") or ()),
            distractors=tuple(_candidate(s) for s in doc.get("distractors") or ()),
            description=doc.get("description", ""),
        )


def _stmt(p: ParameterSpec) -> str:
    return f"{p.lhs} {p.op.value} {p.rhs}"


def _candidate(text) -> ParameterSpec:
    return parse_statement(text).as_fixed(0.0)


def save_manifest(scenario: PopulationScenario, path):
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(scenario.to_manifest(), fh, sort_keys=False, allow_unicode=True)


def load_manifest(path) -> PopulationScenario:
    with open(path, encoding="utf-8") as fh:
        return PopulationScenario.from_manifest(yaml.safe_load(fh))


def _scenario(name, structure: Structure, description="", distractors=()) -> PopulationScenario:
    truth = tuple(p.as_fixed(0.0) for p in structure.omitted_params())
    analysis = structure.analysis_spec()
    analysis = ModelSpec(analysis.params, analysis.catalog, name, analysis.wave_overrides)
    return PopulationScenario(name, structure.population_spec(), analysis, truth,
                              tuple(_candidate(s) for s in distractors), description)


# population values of the omitted parameters
M1_RESIDUAL_COV = 0.4
M2_DIRECT = 0.3
M2_LAG2 = 0.15
M2_INITIAL_VAR = 0.2
M3_MEDIATOR = 0.6
M3_PATH = 0.3
M3_LAGGED = 0.5
CLPM_CONFOUND_COV = 0.3


def _m3(base: Structure, source, target, lagged, mediator_var=1.0) -> Structure:
    s = base
    s.free("M", "~", source, M3_MEDIATOR)
    s.free("M", "~~", "M", mediator_var)
    s.omitted(target, "~", "M", M3_PATH)
    s.omitted(target, "~", lagged, M3_LAGGED)
    return s


def _build_library() -> dict:
    lib = {}

    def add(sc):
        lib[sc.name] = sc

    add(_scenario("Baseline4w", riclpm(4, name="Baseline4w"),
                  "four-wave bivariate RI-CLPM, single indicators"))
    s = riclpm(4, name="M1_Correlation")
    s.omitted("WFX4", "~~", "WFY2", M1_RESIDUAL_COV)
    s.omitted("WFX2", "~~", "WFY4", M1_RESIDUAL_COV)
    add(_scenario("M1_Correlation", s,
                  "two omitted confounders inducing residual covariances across waves"))
    s = riclpm(4, initial_var=M2_INITIAL_VAR, name="M2_DirectEffect")
    s.omitted("WFX4", "~", "WFX2", M2_LAG2)
    add(_scenario("M2_DirectEffect", s, "omitted lag-2 direct path",
                  distractors=["WFX4 ~ x2"]))
    s = _m3(riclpm(4, name="M3_Mediation"), "x1", "WFY4", "WFY2")
    add(_scenario("M3_Mediation", s, "omitted mediator paths into WFY4",
                  distractors=["WFY4 ~ y2"]))

    add(_scenario("Baseline5w2i", riclpm_two_indicator(5, name="Baseline5w2i"),
                  "five-wave RI-CLPM, two indicators, second-order trait"))
    s = riclpm_two_indicator(5, name="FiveWave_Corr")
    s.omitted("WFX4", "~~", "WFY2", M1_RESIDUAL_COV)
    add(_scenario("FiveWave_Corr", s, "omitted residual covariance"))
    s = riclpm_two_indicator(5, name="FiveWave_Direct")
    s.omitted("WFX5", "~", "WFX2", M2_DIRECT)
    add(_scenario("FiveWave_Direct", s, "omitted lag-3 direct path"))
    s = riclpm_two_indicator(5, name="FiveWave_Med")
    s = _m3(s, "x11", "WFX4", "WFX2")
    add(_scenario("FiveWave_Med", s, "omitted mediator paths into WFX4"))

    add(_scenario("CLPM_Baseline", clpm(4, name="CLPM_Baseline"), "four-wave CLPM"))
    s = clpm(4, name="CLPM_Corr")
    s.omitted("X4", "~~", "Y2", CLPM_CONFOUND_COV)
    add(_scenario("CLPM_Corr", s, "omitted residual covariance"))
    s = clpm(4, name="CLPM_Direct")
    s.omitted("Y3", "~", "Y1", M2_DIRECT)
    s.omitted("X4", "~", "X2", M2_DIRECT)
    add(_scenario("CLPM_Direct", s, "omitted lag-2 direct paths"))
    s = _m3(clpm(4, name="CLPM_Med"), "X1", "X4", "X2")
    add(_scenario("CLPM_Med", s, "omitted mediator paths into X4"))
    return lib


_LIBRARY = None


def scenario_library() -> list:
    global _LIBRARY
    if _LIBRARY is None:
        _LIBRARY = _build_library()
    return list(_LIBRARY.values())


def get_scenario(name) -> PopulationScenario:
    """Scenario by library name, or loaded from a YAML manifest path."""
    scenario_library()
    if name in _LIBRARY:
        return _LIBRARY[name]
    if isinstance(name, str) and os.path.isfile(name):
        return load_manifest(name)
    raise UnknownScenario(f"unknown scenario {name!r}; known: {', '.join(_LIBRARY)}")


def population_theta(sc: PopulationScenario, ram=None):
    """``(ram, theta)`` of the analysis model evaluated at the population values."""
    ram = ram or build_ram(sc.analysis_spec)
    pop_ram = sc.population_ram
    A, S = pop_ram.matrices(np.zeros(0))
    pos = {v: i for i, v in enumerate(pop_ram.variables)}
    theta = np.zeros(ram.n_params)
    for k, group in enumerate(ram.param_specs):
        mat, r, c = group[0].cell()
        theta[k] = (A if mat == "A" else S)[pos[r], pos[c]]
    return ram, theta


def check_scenario(sc: PopulationScenario):
    """Identification report of the analysis model at the population point."""
    return identification_check(*population_theta(sc))


# --------------------------------------------------------------------------
# data generation


@dataclass(frozen=True)
class SimulationConfig:
    n: int = 1000
    reps: int = 500
    seed: int = 0
    alpha: float = 0.05
    sqrt_method: str = "chol"
    workers: Optional[int] = None

    def __post_init__(self):
        if self.reps < 1:
            raise ValueError("reps must be >= 1")
        if self.sqrt_method not in ("chol", "sym"):
            raise ValueError("sqrt_method must be 'chol' or 'sym'")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be an unsigned 64-bit integer")


def rng_for(seed: int, rep: int = 0) -> np.random.Generator:
    """Philox stream for replication ``rep`` of run ``seed``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(rep)])))


def sqrt_factor(sigma, method="chol") -> np.ndarray:
    """Matrix R with R R' = Sigma (lower Cholesky or symmetric root)."""
    if isinstance(sigma, ImpliedCovariance):
        sigma = sigma.sigma
    sigma = np.asarray(sigma, dtype=float)
    if method == "chol":
        try:
            return np.linalg.cholesky(sigma)
        except np.linalg.LinAlgError:
            raise NotPositiveDefinite("Sigma") from None
    w, V = np.linalg.eigh(sigma)
    if w.min() <= 0:
        raise NotPositiveDefinite("Sigma")
    return (V * np.sqrt(w)) @ V.T


def generate_data(sigma, n: int, rng, sqrt_method="chol", factor=None) -> np.ndarray:
    """``n`` zero-mean Gaussian rows with covariance ``sigma``."""
    R = factor if factor is not None else sqrt_factor(sigma, sqrt_method)
    eps = rng.standard_normal((n, R.shape[0]))
    return eps @ R.T


# --------------------------------------------------------------------------
# harness


@dataclass(eq=False)
class SimulationSummary:
    scenario: str
    n: int
    reps: int
    df: int
    n_ok: int
    n_failed: int
    mean_chi2: float
    sd_chi2: float
    mean_p: float
    rejection_rate: float
    mean_nfi: float
    mean_cfi: float
    mean_tli: float
    mean_rmsea: float
    detection_rate: Optional[dict] = None
    false_positive_rate: Optional[float] = None
    distractor_rate: Optional[dict] = None
    replications: list = field(default_factory=list, repr=False)

    COLUMNS = ("scenario", "n", "reps", "df", "n_ok", "n_failed", "mean_chi2", "sd_chi2",
               "mean_p", "rejection_rate", "mean_nfi", "mean_cfi", "mean_tli", "mean_rmsea")

    def row(self) -> dict:
        out = {c: getattr(self, c) for c in self.COLUMNS}
        if self.detection_rate is not None:
            for k, v in self.detection_rate.items():
                out[f"detect[{k}]"] = v
            out["false_positive_rate"] = self.false_positive_rate
            for k, v in (self.distractor_rate or {}).items():
                out[f"distractor[{k}]"] = v
        return out


def _threads(cfg: SimulationConfig) -> int:
    cap = os.environ.get("PANELWALD_THREADS")
    n = cfg.workers if cfg.workers is not None else (os.cpu_count() or 1)
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            pass
    return max(1, n)


def _map(fn, jobs, workers):
    if workers <= 1 or len(jobs) < 2:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


def _moments(sc, cfg, rep, factor):
    X = generate_data(None, cfg.n, rng_for(cfg.seed, rep), factor=factor)
    return SampleMoments.from_data(X, sc.var_names)


def _fit_record(sc, moments, opts=None):
    res = ml_fit(sc.analysis_spec, moments, opts)
    idx = fit_indices(res, fit_independence(moments))
    return res, dict(chi2=res.T_ml, df=res.df, p=res.p_value, nfi=idx.nfi, cfi=idx.cfi,
                     tli=idx.tli, rmsea=idx.rmsea, converged=res.converged,
                     warnings=sorted(w.value for w in res.warnings))


def _calibration_job(args):
    sc, cfg, rep, factor = args
    try:
        _, rec = _fit_record(sc, _moments(sc, cfg, rep, factor))
    except PanelWaldError as exc:
        return dict(rep=rep, ok=False, error=type(exc).__name__)
    rec.update(rep=rep, ok=rec["converged"])
    return rec


def _detection_job(args):
    from .twoslw import TwoSlwConfig, run_2slw
    sc, cfg, rep, factor, tcfg = args
    try:
        moments = _moments(sc, cfg, rep, factor)
        base, rec = _fit_record(sc, moments)
        if not base.converged:
            return dict(rep=rep, ok=False, error="NoConvergence")
        report = run_2slw(sc.analysis_spec, moments, tcfg, baseline_fit=base)
    except PanelWaldError as exc:
        return dict(rep=rep, ok=False, error=type(exc).__name__)
    stats = {}
    for row in report.lm_rows():
        if row["disposition"] != "BelowTopK":
            stats[f"{row['lhs']} {row['op']} {row['rhs']}"] = dict(
                rank=row["rank"], lm=row["lm_chi2"], epc=row["epc"], wald=row["wald"],
                p=row["p_value"], disposition=row["disposition"])
    rec.update(rep=rep, ok=True,
               retained=sorted(_stmt(p) for p in report.retained), candidates=stats)
    return rec


def _summarize(sc, cfg, records, detection=False, truth=None):
    ok = [r for r in records if r["ok"]]
    failed = len(records) - len(ok)
    if failed > MAX_FAIL_FRACTION * len(records):
        raise SimulationAborted(
            f"{sc.name}: {failed} of {len(records)} replications failed (n={cfg.n})")
    df = build_ram(sc.analysis_spec).n_observed
    df = df * (df + 1) // 2 - build_ram(sc.analysis_spec).n_params
    col = lambda k: np.array([r[k] for r in ok], dtype=float)
    nan = float("nan")
    chi2 = col("chi2") if ok else np.zeros(0)
    summ = SimulationSummary(
        scenario=sc.name, n=cfg.n, reps=cfg.reps, df=df, n_ok=len(ok), n_failed=failed,
        mean_chi2=float(chi2.mean()) if ok else nan,
        sd_chi2=float(chi2.std(ddof=1)) if len(ok) > 1 else 0.0,
        mean_p=float(col("p").mean()) if ok else nan,
        rejection_rate=float(np.mean(col("p") < cfg.alpha)) if ok else nan,
        mean_nfi=float(col("nfi").mean()) if ok else nan,
        mean_cfi=float(col("cfi").mean()) if ok else nan,
        mean_tli=float(col("tli").mean()) if ok else nan,
        mean_rmsea=float(col("rmsea").mean()) if ok else nan,
        replications=records,
    )
    if detection:
        truth = sc.truth if truth is None else truth
        tset = {_stmt(p) for p in truth}
        summ.detection_rate = {
            _stmt(p): float(np.mean([_stmt(p) in r["retained"] for r in ok])) if ok else nan
            for p in truth}
        summ.false_positive_rate = float(np.mean(
            [sum(1 for x in r["retained"] if x not in tset) for r in ok])) if ok else nan
        summ.distractor_rate = {
            _stmt(p): float(np.mean([_stmt(p) in r["retained"] for r in ok])) if ok else nan
            for p in sc.distractors}
    return summ


def run_calibration(scenario, cfg: SimulationConfig) -> SimulationSummary:
    """Fit the analysis model to ``cfg.reps`` samples and summarize the fit statistics."""
    sc = get_scenario(scenario) if isinstance(scenario, str) else scenario
    factor = sqrt_factor(sc.sigma(), cfg.sqrt_method)
    jobs = [(sc, cfg, rep, factor) for rep in range(cfg.reps)]
    records = _map(_calibration_job, jobs, _threads(cfg))
    return _summarize(sc, cfg, records)


def run_detection(scenario, cfg: SimulationConfig, twoslw_cfg=None,
                  truth=None) -> SimulationSummary:
    """Run the two-stage search on ``cfg.reps`` samples and tally retained parameters.

    ``truth`` overrides the scenario's ground truth (an empty list turns the
    run into a false-positive check).
    """
    from .twoslw import TwoSlwConfig
    sc = get_scenario(scenario) if isinstance(scenario, str) else scenario
    tcfg = twoslw_cfg or TwoSlwConfig(alpha=cfg.alpha)
    factor = sqrt_factor(sc.sigma(), cfg.sqrt_method)
    jobs = [(sc, cfg, rep, factor, tcfg) for rep in range(cfg.reps)]
    records = _map(_detection_job, jobs, _threads(cfg))
    return _summarize(sc, cfg, records, detection=True, truth=truth)
