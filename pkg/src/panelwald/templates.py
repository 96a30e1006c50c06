"""Builders for panel model structures.

A :class:`Structure` records each statement once together with its
population value and whether the analysis model frees it, fixes it, or
omits it.  From that single record both the analysis specification and the
all-fixed population specification are produced.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .dsl import ModelSpec, Op, ParameterSpec

FREE, FIXED, OMITTED = "free", "fixed", "omitted"


@dataclass
class _Entry:
    param: ParameterSpec        # key only (value/label ignored)
    pop: float
    status: str
    label: str = None


@dataclass
class Structure:
    name: str = "model"
    wave_overrides: dict = field(default_factory=dict)
    entries: list = field(default_factory=list)

    def _add(self, lhs, op, rhs, pop, status, label=None):
        op = Op(op)
        if op is Op.COVARIANCE:
            lhs, rhs = sorted((lhs, rhs))
        key = (lhs, op.value, rhs)
        for e in self.entries:
            if e.param.key == key:
                e.pop, e.status, e.label = float(pop), status, label
                return self
        self.entries.append(_Entry(ParameterSpec(lhs, op, rhs), float(pop), status, label))
        return self

    def free(self, lhs, op, rhs, pop, label=None):
        return self._add(lhs, op, rhs, pop, FREE, label)

    def fixed(self, lhs, op, rhs, value):
        return self._add(lhs, op, rhs, value, FIXED)

    def omitted(self, lhs, op, rhs, pop):
        """Present in the population only."""
        return self._add(lhs, op, rhs, pop, OMITTED)

    def copy(self, name=None) -> "Structure":
        return Structure(name or self.name, dict(self.wave_overrides),
                         [_Entry(e.param, e.pop, e.status, e.label) for e in self.entries])

    def analysis_spec(self) -> ModelSpec:
        params = []
        for e in self.entries:
            p = e.param
            if e.status == FREE:
                params.append(ParameterSpec(p.lhs, p.op, p.rhs, None, e.label))
            elif e.status == FIXED:
                params.append(ParameterSpec(p.lhs, p.op, p.rhs, e.pop))
        return ModelSpec.from_params(params, self.name, self.wave_overrides)

    def population_spec(self) -> ModelSpec:
        params = [ParameterSpec(e.param.lhs, e.param.op, e.param.rhs, e.pop)
                  for e in self.entries if not (e.status == OMITTED and e.pop == 0)]
        return ModelSpec.from_params(params, f"{self.name}_population", self.wave_overrides)

    def omitted_params(self) -> list:
        return [e.param for e in self.entries if e.status == OMITTED]

    def population_values(self) -> dict:
        return {str(e.param): e.pop for e in self.entries}


def riclpm(T=4, ar=0.25, cl=0.15, within_var=1.0, within_cov=0.2,
           between_var=1.0, between_cov=0.3, initial_var=None, name="riclpm") -> Structure:
    """Bivariate single-indicator RI-CLPM with unit loadings.

    Observed ``x1..xT``, ``y1..yT``; within factors ``WFXt``/``WFYt``;
    between factors ``BX``/``BY``.  ``initial_var`` is the wave-1 within
    variance (defaults to ``within_var``).
    """
    v1 = within_var if initial_var is None else initial_var
    s = Structure(name)
    for t in range(1, T + 1):
        s.fixed("BX", "=~", f"x{t}", 1.0)
    for t in range(1, T + 1):
        s.fixed("BY", "=~", f"y{t}", 1.0)
    for t in range(1, T + 1):
        s.fixed(f"WFX{t}", "=~", f"x{t}", 1.0)
        s.fixed(f"WFY{t}", "=~", f"y{t}", 1.0)
    for t in range(1, T + 1):
        s.fixed(f"x{t}", "~~", f"x{t}", 0.0)
        s.fixed(f"y{t}", "~~", f"y{t}", 0.0)
    for t in range(2, T + 1):
        s.free(f"WFX{t}", "~", f"WFX{t - 1}", ar)
        s.free(f"WFX{t}", "~", f"WFY{t - 1}", cl)
        s.free(f"WFY{t}", "~", f"WFX{t - 1}", cl)
        s.free(f"WFY{t}", "~", f"WFY{t - 1}", ar)
    for t in range(1, T + 1):
        v = v1 if t == 1 else within_var
        s.free(f"WFX{t}", "~~", f"WFX{t}", v)
        s.free(f"WFY{t}", "~~", f"WFY{t}", v)
        s.free(f"WFX{t}", "~~", f"WFY{t}", within_cov * (v1 if t == 1 else 1.0))
    s.free("BX", "~~", "BX", between_var)
    s.free("BY", "~~", "BY", between_var)
    s.free("BX", "~~", "BY", between_cov)
    return s


def riclpm_two_indicator(T=5, ar=0.25, cl=0.15, loading=0.8, indicator_var=0.3,
                         within_var=1.0, within_cov=0.2, trait_var=0.3,
                         between_resid=0.7, name="riclpm5w2i") -> Structure:
    """RI-CLPM with two indicators per construct and wave and a second-order trait.

    Indicators are ``x{t}{k}``/``y{t}{k}`` (wave t, indicator k).  Second
    loadings and indicator residual variances are held equal over waves.
    The between factors load on every indicator with unit loadings and
    share the second-order factor ``L``.
    """
    s = Structure(name)
    ind = {}
    for t in range(1, T + 1):
        for c in "xy":
            ind[(c, t)] = (f"{c}{t}1", f"{c}{t}2")
            for k in (1, 2):
                s.wave_overrides[f"{c}{t}{k}"] = t
    for c, B in (("x", "BX"), ("y", "BY")):
        for t in range(1, T + 1):
            for v in ind[(c, t)]:
                s.fixed(B, "=~", v, 1.0)
    s.fixed("L", "=~", "BX", 1.0)
    s.fixed("L", "=~", "BY", 1.0)
    for t in range(1, T + 1):
        for c, W in (("x", "WFX"), ("y", "WFY")):
            a, b = ind[(c, t)]
            s.fixed(f"{W}{t}", "=~", a, 1.0)
            s.free(f"{W}{t}", "=~", b, loading, label=f"l{c}")
    for t in range(2, T + 1):
        s.free(f"WFX{t}", "~", f"WFX{t - 1}", ar)
        s.free(f"WFX{t}", "~", f"WFY{t - 1}", cl)
        s.free(f"WFY{t}", "~", f"WFX{t - 1}", cl)
        s.free(f"WFY{t}", "~", f"WFY{t - 1}", ar)
    for t in range(1, T + 1):
        s.free(f"WFX{t}", "~~", f"WFX{t}", within_var)
        s.free(f"WFY{t}", "~~", f"WFY{t}", within_var)
        s.free(f"WFX{t}", "~~", f"WFY{t}", within_cov)
    for t in range(1, T + 1):
        for c in "xy":
            for k, v in enumerate(ind[(c, t)], start=1):
                s.free(v, "~~", v, indicator_var, label=f"e{c}{k}")
    s.free("L", "~~", "L", trait_var)
    s.free("BX", "~~", "BX", between_resid)
    s.free("BY", "~~", "BY", between_resid)
    return s


def clpm(T=4, ar=0.5, cl=0.2, var=1.0, cov=0.3, name="clpm") -> Structure:
    """Observed-variable cross-lagged panel model ``X1..XT``, ``Y1..YT``."""
    s = Structure(name)
    for t in range(2, T + 1):
        s.free(f"X{t}", "~", f"X{t - 1}", ar)
        s.free(f"X{t}", "~", f"Y{t - 1}", cl)
        s.free(f"Y{t}", "~", f"X{t - 1}", cl)
        s.free(f"Y{t}", "~", f"Y{t - 1}", ar)
    for t in range(1, T + 1):
        s.free(f"X{t}", "~~", f"X{t}", var)
        s.free(f"Y{t}", "~~", f"Y{t}", var)
        s.free(f"X{t}", "~~", f"Y{t}", cov)
    return s


def single_indicator_riclpm(T=3, loading_x=1.0, loading_y=1.0, resid=1.0, ar=0.25, cl=0.15,
                            within_var=1.0, between_var=1.0, between_cov=0.3) -> Structure:
    """RI-CLPM whose within factors are measured with free-valued loadings and residuals.

    Used for the loading-scaling and near-collinearity checks; loadings and
    indicator residual variances are fixed at the given values.
    """
    s = riclpm(T, ar, cl, within_var, 0.0, between_var, between_cov, name="single_indicator")
    for t in range(1, T + 1):
        s.fixed(f"WFX{t}", "=~", f"x{t}", loading_x)
        s.fixed(f"WFY{t}", "=~", f"y{t}", loading_y)
        s.fixed(f"x{t}", "~~", f"x{t}", resid)
        s.fixed(f"y{t}", "~~", f"y{t}", resid)
    return s
