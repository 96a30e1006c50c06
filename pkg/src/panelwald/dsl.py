"""Parser for a lavaan-style model description language.

Supported statements (one per line, ``#`` starts a comment)::

    F =~ 1*x1 + x2          # loadings (latent definition)
    y ~ a*x + 0.5*z         # regressions, ``a`` is an equality label
    x ~~ y                  # (co)variances
    x ~ 1                   # intercept, parsed but not modelled
    @wave: M=2, c1=3        # wave index overrides

A numeric prefix fixes a coefficient, an identifier prefix labels it.
Parameters sharing a label are constrained equal.
"""

from __future__ import annotations

import enum
import itertools
import re
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

from .errors import DuplicateParameter, ModelSyntaxError


class Op(str, enum.Enum):
    LOADING = "=~"
    REGRESSION = "~"
    COVARIANCE = "~~"
    INTERCEPT = "~1"


# canonical sort position of each operator
_OP_ORDER = {Op.LOADING: 0, Op.REGRESSION: 1, Op.COVARIANCE: 2, Op.INTERCEPT: 3}


class Role(str, enum.Enum):
    WITHIN_FACTOR = "within"
    BETWEEN_FACTOR = "between"
    INDICATOR = "indicator"
    OBSERVED = "observed"


@dataclass(frozen=True)
class ModelSource:
    text: str
    name: str = "model"


@dataclass(frozen=True)
class ParameterSpec:
    """One statement of the model: ``lhs op rhs`` with an optional fixed value.

    ``value is None`` means the parameter is free.
    """

    lhs: str
    op: Op
    rhs: str
    value: Optional[float] = None
    label: Optional[str] = None
    line: int = field(default=0, compare=False, hash=False)
    col: int = field(default=0, compare=False, hash=False)

    @property
    def free(self) -> bool:
        return self.value is None

    @property
    def key(self) -> tuple:
        return (self.lhs, self.op.value, self.rhs)

    @property
    def is_variance(self) -> bool:
        return self.op is Op.COVARIANCE and self.lhs == self.rhs

    def cell(self):
        """Matrix cell ``(matrix, row, col)`` in the RAM layout, or None."""
        if self.op is Op.LOADING:
            return ("A", self.rhs, self.lhs)
        if self.op is Op.REGRESSION:
            return ("A", self.lhs, self.rhs)
        if self.op is Op.COVARIANCE:
            return ("S",) + tuple(sorted((self.lhs, self.rhs)))
        return None

    def as_fixed(self, value: float) -> "ParameterSpec":
        return replace(self, value=float(value), label=None)

    def as_free(self) -> "ParameterSpec":
        return replace(self, value=None)

    def __str__(self):
        if self.op is Op.INTERCEPT:
            rhs = "1" if self.value is None else f"{_fmt_number(self.value)}*1"
            return f"{self.lhs} ~ {rhs}"
        return f"{self.lhs} {self.op.value} {self._modifier()}{self.rhs}"

    def _modifier(self):
        if self.value is not None:
            return f"{_fmt_number(self.value)}*"
        if self.label:
            return f"{self.label}*"
        return ""


def _fmt_number(v: float) -> str:
    if float(v).is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


@dataclass(frozen=True)
class VariableCatalog:
    observed: tuple
    latent: tuple
    wave_of: dict
    role_of: dict

    @property
    def variables(self) -> tuple:
        """All variables, observed first then latent (the RAM ordering)."""
        return self.observed + self.latent

    @property
    def indicators(self) -> tuple:
        return tuple(v for v in self.observed if self.role_of[v] is Role.INDICATOR)

    def wave(self, name):
        return self.wave_of.get(name)

    def stem(self, name) -> str:
        """Name with the wave suffix removed (``WFX3`` -> ``WFX``)."""
        return _TRAILING_INT.sub("", name)


_TRAILING_INT = re.compile(r"(\d+)$")


@dataclass(frozen=True)
class ModelSpec:
    params: tuple
    catalog: VariableCatalog
    name: str = "model"
    wave_overrides: tuple = ()

    @classmethod
    def from_params(cls, params: Iterable[ParameterSpec], name="model", wave_overrides=None):
        params = tuple(params)
        _check_duplicates(params)
        overrides = dict(wave_overrides or {})
        return cls(params, build_catalog(params, overrides), name,
                   tuple(sorted(overrides.items())))

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    @property
    def free_params(self) -> tuple:
        return tuple(p for p in self.params if p.free)

    def find(self, key) -> Optional[ParameterSpec]:
        key = _canonical_key(key)
        for p in self.params:
            if p.key == key:
                return p
        return None

    def __contains__(self, key):
        return self.find(key) is not None

    def used_cells(self) -> set:
        return {c for c in (p.cell() for p in self.params) if c is not None}

    def with_params(self, extra: Iterable[ParameterSpec], name=None) -> "ModelSpec":
        """Return a new spec with ``extra`` appended as given."""
        return ModelSpec.from_params(self.params + tuple(extra), name or self.name,
                                     dict(self.wave_overrides))

    def without(self, keys) -> "ModelSpec":
        keys = {_canonical_key(k) for k in keys}
        return ModelSpec.from_params([p for p in self.params if p.key not in keys],
                                     self.name, dict(self.wave_overrides))

    def to_text(self) -> str:
        return format_model(self)


def _canonical_key(key):
    if isinstance(key, ParameterSpec):
        return key.key
    if isinstance(key, str):
        return parse_statement(key).key
    lhs, op, rhs = key
    op = Op(op).value
    if op == "~~":
        lhs, rhs = sorted((lhs, rhs))
    return (lhs, op, rhs)


def _check_duplicates(params):
    seen = {}
    for p in params:
        if p.key in seen:
            raise DuplicateParameter(p.key, p.line or None)
        seen[p.key] = p


def build_catalog(params, wave_overrides=None) -> VariableCatalog:
    wave_overrides = wave_overrides or {}
    order = {}
    latent = []
    for p in params:
        if p.op is Op.LOADING and p.lhs not in latent:
            latent.append(p.lhs)
        for name in (p.lhs, p.rhs):
            if p.op is Op.INTERCEPT and name == p.rhs:
                continue
            order.setdefault(name, len(order))
    indicators = {p.rhs for p in params if p.op is Op.LOADING and p.rhs not in latent}

    wave_of = {}
    for name in order:
        if name in wave_overrides:
            wave_of[name] = int(wave_overrides[name])
            continue
        m = _TRAILING_INT.search(name)
        if m:
            wave_of[name] = int(m.group(1))

    role_of = {}
    for name in order:
        if name in latent:
            role_of[name] = Role.WITHIN_FACTOR if name in wave_of else Role.BETWEEN_FACTOR
        elif name in indicators:
            role_of[name] = Role.INDICATOR
        else:
            role_of[name] = Role.OBSERVED

    observed = [v for v in order if v not in latent]
    # wave-major ordering; untimed variables keep declaration order at the end
    observed.sort(key=lambda v: (wave_of.get(v, float("inf")), order[v]))
    latent.sort(key=lambda v: order[v])
    return VariableCatalog(tuple(observed), tuple(latent), wave_of, role_of)


# --------------------------------------------------------------------------
# tokenizer / parser

_TOKEN = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<op>=~|~~|~)
  | (?P<plus>\+)
  | (?P<star>\*)
  | (?P<number>-?(?:\d+\.\d*|\.\d+|\d+)(?:[eE][-+]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z0-9_.]*)
    """,
    re.VERBOSE,
)


def _tokenize(text, lineno):
    pos = 0
    out = []
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise ModelSyntaxError(lineno, pos + 1, f"unexpected character {text[pos]!r}")
        kind = m.lastgroup
        if kind != "ws":
            out.append((kind, m.group(), pos + 1))
        pos = m.end()
    return out


def _strip_comment(line):
    i = line.find("#")
    return line if i < 0 else line[:i]


def parse_statement(text, lineno=1) -> ParameterSpec:
    params = _parse_line(text, lineno)
    if len(params) != 1:
        raise ModelSyntaxError(lineno, 1, "expected exactly one parameter")
    return params[0]


def _parse_line(text, lineno):
    toks = _tokenize(text, lineno)
    if not toks:
        return []
    if toks[0][0] != "name":
        raise ModelSyntaxError(lineno, toks[0][2], f"expected variable name, got {toks[0][1]!r}")
    lhs = toks[0][1]
    if len(toks) < 2 or toks[1][0] != "op":
        col = toks[1][2] if len(toks) > 1 else len(text) + 1
        raise ModelSyntaxError(lineno, col, "expected operator '=~', '~' or '~~'")
    op_text, op_col = toks[1][1], toks[1][2]
    rest = toks[2:]
    if not rest:
        raise ModelSyntaxError(lineno, len(text) + 1, f"missing right-hand side after {op_text!r}")

    terms = []
    current = []
    for tok in rest:
        if tok[0] == "plus":
            if not current:
                raise ModelSyntaxError(lineno, tok[2], "dangling '+'")
            terms.append(current)
            current = []
        elif tok[0] == "op":
            raise ModelSyntaxError(lineno, tok[2], f"unexpected operator {tok[1]!r}")
        else:
            current.append(tok)
    if not current:
        raise ModelSyntaxError(lineno, rest[-1][2], "dangling '+'")
    terms.append(current)

    params = []
    for term in terms:
        params.append(_parse_term(lhs, op_text, term, lineno, toks[0][2]))
    return params


def _parse_term(lhs, op_text, term, lineno, col):
    value = label = None
    if len(term) == 3 and term[1][0] == "star":
        mod, rhs_tok = term[0], term[2]
        if mod[0] == "number":
            value = float(mod[1])
        elif mod[1] == "NA":
            pass
        else:
            label = mod[1]
    elif len(term) == 1:
        rhs_tok = term[0]
    else:
        raise ModelSyntaxError(lineno, term[0][2], "malformed term; expected [modifier*]name")

    if rhs_tok[0] == "number":
        if op_text == "~" and rhs_tok[1] in ("1", "1.0"):
            return ParameterSpec(lhs, Op.INTERCEPT, "1", value, label, lineno, col)
        raise ModelSyntaxError(lineno, rhs_tok[2], f"expected variable name, got {rhs_tok[1]!r}")
    if rhs_tok[0] != "name":
        raise ModelSyntaxError(lineno, rhs_tok[2], f"expected variable name, got {rhs_tok[1]!r}")
    rhs = rhs_tok[1]

    op = Op(op_text)
    if op is Op.COVARIANCE:
        lhs, rhs = sorted((lhs, rhs))
    elif lhs == rhs:
        raise ModelSyntaxError(lineno, rhs_tok[2], f"variable {rhs!r} cannot {op_text} itself")
    return ParameterSpec(lhs, op, rhs, value, label, lineno, col)


_WAVE_ITEM = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_.]*)\s*=\s*(\d+)\s*$")


def _parse_wave_meta(body, lineno, offset):
    out = {}
    for item in body.split(","):
        if not item.strip():
            continue
        m = _WAVE_ITEM.match(item)
        if m is None:
            raise ModelSyntaxError(lineno, offset, f"malformed @wave entry {item.strip()!r}")
        out[m.group(1)] = int(m.group(2))
    return out


def parse_model(src) -> ModelSpec:
    """Parse model text (or a :class:`ModelSource`) into a :class:`ModelSpec`."""
    if isinstance(src, str):
        src = ModelSource(src)
    params = []
    overrides = {}
    for lineno, raw in enumerate(src.text.splitlines(), start=1):
        line = _strip_comment(raw)
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith("@"):
            head, _, body = stripped.partition(":")
            if head.strip() != "@wave":
                raise ModelSyntaxError(lineno, line.index("@") + 1, f"unknown directive {head!r}")
            overrides.update(_parse_wave_meta(body, lineno, line.index("@") + 1))
            continue
        params.extend(_parse_line(line, lineno))
    if not params:
        raise ModelSyntaxError(1, 1, "model description is empty")
    return ModelSpec.from_params(params, src.name, overrides)


def format_model(spec: ModelSpec) -> str:
    """Canonical text form; ``parse_model(format_model(s)) == s``."""
    lines = [f"{p}" for p in spec.params]
    if spec.wave_overrides:
        items = ", ".join(f"{k}={v}" for k, v in spec.wave_overrides)
        lines.insert(0, f"@wave: {items}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# candidate universe

def enumerate_candidates(spec: ModelSpec) -> list:
    """Every admissible parameter absent from ``spec``, fixed at zero.

    Covariances over all distinct variable pairs, regressions onto latents and
    onto observed variables that are not indicators, and cross-loadings of
    latents onto indicators.  Cells already occupied by a spec parameter
    (free or fixed) are skipped, as are variances and intercepts.
    """
    cat = spec.catalog
    used = spec.used_cells()
    latent = set(cat.latent)
    indicators = set(cat.indicators)
    names = sorted(cat.variables)
    out = []

    for a, b in itertools.combinations(names, 2):
        p = ParameterSpec(a, Op.COVARIANCE, b, 0.0)
        if p.cell() not in used:
            out.append(p)

    for lhs, rhs in itertools.permutations(names, 2):
        if lhs in indicators:
            continue
        p = ParameterSpec(lhs, Op.REGRESSION, rhs, 0.0)
        if p.cell() not in used:
            out.append(p)

    for f in sorted(latent):
        for x in sorted(indicators):
            p = ParameterSpec(f, Op.LOADING, x, 0.0)
            if p.cell() not in used:
                out.append(p)

    out.sort(key=lambda p: (p.lhs, _OP_ORDER[p.op], p.rhs))
    return out


def candidate_bound(spec: ModelSpec) -> int:
    """Upper bound on ``len(enumerate_candidates(spec))``."""
    n_lat = len(spec.catalog.latent)
    n_obs = len(spec.catalog.observed)
    v = n_lat + n_obs
    return v * (v - 1) + v * (v - 1) // 2 + n_lat * n_obs
