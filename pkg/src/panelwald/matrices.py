"""Model-implied covariance matrices.

Two independent routes are provided: the general RAM evaluator
``F (I - A)^-1 S (I - A)^-T F'`` for any parsed model, and the closed-form
RI-CLPM expression ``Gamma (J Sigma_pi J' + Sigma_u) Gamma'`` built from the
lag matrix.  The second exists mainly as an oracle for the first.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .dsl import ModelSpec, Op, ParameterSpec
from .errors import (NonFiniteParameter, NotPositiveDefinite, SingularSystem,
                     UnstableProcess)

# singular values below this fraction of the largest are treated as null space
NULL_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class RamSystem:
    """RAM matrices of a model plus the map from theta to matrix cells.

    ``A0``/``S0`` hold fixed values; free cells are overwritten from theta
    through ``a_*`` and ``s_*`` index arrays.  Symmetric S cells are stored
    once (row <= col) and mirrored on evaluation.
    """

    variables: tuple
    observed: tuple
    obs_idx: np.ndarray
    A0: np.ndarray
    S0: np.ndarray
    a_rows: np.ndarray
    a_cols: np.ndarray
    a_theta: np.ndarray
    s_rows: np.ndarray
    s_cols: np.ndarray
    s_theta: np.ndarray
    param_names: tuple
    param_specs: tuple  # per theta index: tuple of ParameterSpec bound to it
    n_extra: int = 0
    index_of: dict = field(default_factory=dict)

    @property
    def n_params(self) -> int:
        return len(self.param_names)

    @property
    def n_observed(self) -> int:
        return len(self.observed)

    @property
    def F(self) -> np.ndarray:
        out = np.zeros((len(self.observed), len(self.variables)))
        out[np.arange(len(self.observed)), self.obs_idx] = 1.0
        return out

    @property
    def theta_map(self) -> list:
        """(theta index, matrix, row, col) bindings, symmetric cells listed once."""
        out = [(int(k), "A", int(r), int(c))
               for k, r, c in zip(self.a_theta, self.a_rows, self.a_cols)]
        out += [(int(k), "S", int(r), int(c))
                for k, r, c in zip(self.s_theta, self.s_rows, self.s_cols)]
        return sorted(out)

    def matrices(self, theta):
        theta = _check_theta(self, theta)
        A = self.A0.copy()
        S = self.S0.copy()
        A[self.a_rows, self.a_cols] = theta[self.a_theta]
        S[self.s_rows, self.s_cols] = theta[self.s_theta]
        S[self.s_cols, self.s_rows] = theta[self.s_theta]
        return A, S

    def variance_theta(self) -> np.ndarray:
        """Theta indices bound to a diagonal cell of S."""
        mask = self.s_rows == self.s_cols
        return np.unique(self.s_theta[mask])

    def values(self, theta) -> dict:
        return dict(zip(self.param_names, np.asarray(theta, dtype=float)))


def _param_name(p: ParameterSpec) -> str:
    return f"{p.lhs}{p.op.value}{p.rhs}"


def build_ram(spec: ModelSpec, extra=()) -> RamSystem:
    """Translate a spec into RAM form.

    Every variable without an explicit variance statement receives a free
    variance.  ``extra`` parameters are appended as additional free
    parameters after all spec parameters (used by the score test).
    """
    cat = spec.catalog
    variables = cat.variables
    pos = {v: i for i, v in enumerate(variables)}
    m = len(variables)
    A0 = np.zeros((m, m))
    S0 = np.zeros((m, m))

    explicit_var = {p.lhs for p in spec.params if p.is_variance}
    auto = [ParameterSpec(v, Op.COVARIANCE, v) for v in variables if v not in explicit_var]

    groups = []          # list of lists of ParameterSpec sharing a theta index
    by_label = {}
    for p in spec.params:
        if p.op is Op.INTERCEPT:
            continue
        _, r, c = p.cell()
        r, c = pos[r], pos[c]
        if not p.free:
            if p.cell()[0] == "A":
                A0[r, c] = p.value
            else:
                S0[r, c] = S0[c, r] = p.value
            continue
        if p.label is not None and p.label in by_label:
            groups[by_label[p.label]].append(p)
            continue
        if p.label is not None:
            by_label[p.label] = len(groups)
        groups.append([p])
    n_base = len(groups) + len(auto)
    groups.extend([p] for p in auto)
    for p in extra:
        groups.append([p.as_free()])

    a_rows, a_cols, a_theta, s_rows, s_cols, s_theta = [], [], [], [], [], []
    seen_cells = {}
    for k, group in enumerate(groups):
        for p in group:
            mat, r, c = p.cell()
            r, c = pos[r], pos[c]
            if mat == "S":
                r, c = min(r, c), max(r, c)
            cell = (mat, r, c)
            if cell in seen_cells:
                raise ValueError(f"cell of {p} already bound to parameter {seen_cells[cell]}")
            seen_cells[cell] = k
            if mat == "A":
                a_rows.append(r)
                a_cols.append(c)
                a_theta.append(k)
                A0[r, c] = 0.0
            else:
                s_rows.append(r)
                s_cols.append(c)
                s_theta.append(k)
                S0[r, c] = S0[c, r] = 0.0

    names = []
    for group in groups:
        p = group[0]
        names.append(p.label if p.label else _param_name(p))
    ia = lambda xs: np.asarray(xs, dtype=np.intp)
    return RamSystem(
        variables=variables,
        observed=cat.observed,
        obs_idx=ia([pos[v] for v in cat.observed]),
        A0=A0,
        S0=S0,
        a_rows=ia(a_rows), a_cols=ia(a_cols), a_theta=ia(a_theta),
        s_rows=ia(s_rows), s_cols=ia(s_cols), s_theta=ia(s_theta),
        param_names=tuple(names),
        param_specs=tuple(tuple(g) for g in groups),
        n_extra=len(groups) - n_base,
        index_of={q.key: k for k, g in enumerate(groups) for q in g},
    )


def _check_theta(ram, theta):
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (ram.n_params,):
        raise ValueError(f"theta has shape {theta.shape}, expected ({ram.n_params},)")
    if not np.all(np.isfinite(theta)):
        raise NonFiniteParameter("theta contains NaN or Inf")
    return theta


@dataclass(frozen=True, eq=False)
class ImpliedCovariance:
    sigma: np.ndarray
    logdet: float
    is_pd: bool
    chol: np.ndarray = None

    @classmethod
    def from_matrix(cls, sigma):
        sigma = 0.5 * (sigma + sigma.T)
        try:
            L = np.linalg.cholesky(sigma)
        except np.linalg.LinAlgError:
            sign, logdet = np.linalg.slogdet(sigma)
            return cls(sigma, float(logdet) if sign > 0 else float("nan"), False)
        logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
        return cls(sigma, logdet, True, L)

    def inverse(self):
        if not self.is_pd:
            raise NotPositiveDefinite("Sigma")
        Linv = scipy.linalg.solve_triangular(self.chol, np.eye(len(self.sigma)), lower=True)
        return Linv.T @ Linv


def _inv_I_minus_A(A):
    m = len(A)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(np.eye(m) - A, check_finite=False)
    d = np.abs(np.diag(lu))
    if d.min() <= 1e-12 * max(1.0, d.max()):
        raise SingularSystem("(I - A) is singular")
    return scipy.linalg.lu_solve((lu, piv), np.eye(m), check_finite=False)


class RamState:
    """Quantities shared by Sigma, its Jacobian and the ML gradient at one theta."""

    __slots__ = ("ram", "theta", "A", "S", "B", "G", "H", "sigma")

    def __init__(self, ram: RamSystem, theta):
        self.ram = ram
        self.theta = _check_theta(ram, theta)
        self.A, self.S = ram.matrices(self.theta)
        self.B = _inv_I_minus_A(self.A)
        self.G = self.B[ram.obs_idx]            # p x m
        self.H = self.B @ self.S @ self.G.T     # m x p
        sigma = self.G @ self.S @ self.G.T
        self.sigma = 0.5 * (sigma + sigma.T)

    def jacobian(self, which=None) -> np.ndarray:
        """dSigma/dtheta_k as a (q, p, p) array."""
        ram = self.ram
        q, p = ram.n_params, ram.n_observed
        out = np.zeros((q, p, p))
        G, H = self.G, self.H
        if len(ram.a_rows):
            T = G[:, ram.a_rows].T[:, :, None] * H[ram.a_cols, :][:, None, :]
            np.add.at(out, ram.a_theta, T + T.transpose(0, 2, 1))
        if len(ram.s_rows):
            Gi = G[:, ram.s_rows].T
            Gj = G[:, ram.s_cols].T
            T = Gi[:, :, None] * Gj[:, None, :]
            off = (ram.s_rows != ram.s_cols)[:, None, None]
            np.add.at(out, ram.s_theta, T + off * T.transpose(0, 2, 1))
        if which is not None:
            return out[which]
        return out

    def ml_gradient(self, W) -> np.ndarray:
        """tr(W dSigma/dtheta_k) for symmetric W, without forming the Jacobian."""
        ram = self.ram
        g = np.zeros(ram.n_params)
        GW = self.G.T @ W                     # m x p
        if len(ram.a_rows):
            QA = GW @ self.H.T                # m x m
            np.add.at(g, ram.a_theta, 2.0 * QA[ram.a_rows, ram.a_cols])
        if len(ram.s_rows):
            QS = GW @ self.G                  # m x m
            w = np.where(ram.s_rows == ram.s_cols, 1.0, 2.0)
            np.add.at(g, ram.s_theta, w * QS[ram.s_rows, ram.s_cols])
        return g


def implied_sigma_ram(ram: RamSystem, theta) -> ImpliedCovariance:
    return ImpliedCovariance.from_matrix(RamState(ram, theta).sigma)


def sigma_jacobian(ram: RamSystem, theta) -> list:
    """List of symmetric matrices dSigma/dtheta_j, one per free parameter."""
    return list(RamState(ram, theta).jacobian())


def information_from(sigma_inv, jac) -> np.ndarray:
    """0.5 * tr(Sigma^-1 D_j Sigma^-1 D_k) for a stack of derivative matrices."""
    M = np.einsum("ab,kbc->kac", sigma_inv, jac)
    q = len(jac)
    flat = M.reshape(q, -1)
    flat_t = M.transpose(0, 2, 1).reshape(q, -1)
    info = 0.5 * flat @ flat_t.T
    return 0.5 * (info + info.T)


def fisher_information(ram: RamSystem, theta) -> np.ndarray:
    """Expected information per observation for the free parameters."""
    state = RamState(ram, theta)
    implied = ImpliedCovariance.from_matrix(state.sigma)
    if not implied.is_pd:
        raise NotPositiveDefinite("Sigma")
    return information_from(implied.inverse(), state.jacobian())


def vech_weighted(mats) -> np.ndarray:
    """Half-vectorize each matrix; off-diagonal entries carry weight sqrt(2)."""
    mats = np.asarray(mats)
    p = mats.shape[-1]
    r, c = np.triu_indices(p)
    w = np.where(r == c, 1.0, np.sqrt(2.0))
    return mats[..., r, c] * w


@dataclass(frozen=True)
class IdentificationReport:
    rank: int
    n_params: int
    condition: float
    deficient: tuple
    singular_values: tuple = ()

    @property
    def full_rank(self) -> bool:
        return self.rank == self.n_params


def identification_check(ram: RamSystem, theta, tol=NULL_TOL) -> IdentificationReport:
    """Rank and conditioning of the Jacobian of vech(Sigma).

    ``deficient`` lists theta indices carrying weight (>= 0.1 in absolute
    value) on right singular vectors whose singular value is below
    ``tol * s_max``.  Never raises; an unevaluable point reports rank 0.
    """
    q = ram.n_params
    if q == 0:
        return IdentificationReport(0, 0, 1.0, ())
    try:
        jac = RamState(ram, theta).jacobian()
    except (SingularSystem, NonFiniteParameter, ValueError):
        return IdentificationReport(0, q, float("inf"), tuple(range(q)))
    J = vech_weighted(jac).T                    # moments x params
    _, s, vt = np.linalg.svd(J, full_matrices=True)
    s_full = np.zeros(q)
    s_full[: len(s)] = s
    smax = s_full.max()
    if smax == 0:
        return IdentificationReport(0, q, float("inf"), tuple(range(q)), tuple(s_full))
    small = s_full < tol * smax
    rank = int(q - small.sum())
    smin = s_full.min()
    condition = float(smax / smin) if smin > 0 else float("inf")
    null = vt[small]
    deficient = tuple(int(k) for k in np.flatnonzero(np.any(np.abs(null) >= 0.1, axis=0)))
    return IdentificationReport(rank, q, condition, deficient, tuple(s_full))


# --------------------------------------------------------------------------
# closed-form RI-CLPM


@dataclass(frozen=True, eq=False)
class RiclpmClosedForm:
    """Bivariate RI-CLPM in stacked form ``z = Gamma (J pi + u)``.

    ``Phi`` is the lag matrix acting on ``(x*, y*)``: row one holds the x
    equation ``(beta_x, gamma_x)``, row two the y equation ``(gamma_y, beta_y)``.
    ``Sigma_pi`` is the covariance of ``pi = (delta_x, delta_y, eta_x, eta_y)``.
    """

    Phi: np.ndarray
    Sigma_pi: np.ndarray
    Sigma_u: np.ndarray
    T: int
    Psi: np.ndarray = field(default_factory=lambda: np.eye(2))

    @classmethod
    def from_blocks(cls, Phi, Sigma_eta, Sigma_eps, Sigma_v, T, Psi=None, Sigma_delta=None):
        Sigma_pi = np.zeros((4, 4))
        Sigma_pi[2:, 2:] = Sigma_eta
        if Sigma_delta is not None:
            Sigma_pi[:2, :2] = Sigma_delta
        Sigma_u = scipy.linalg.block_diag(Sigma_eps, *([np.asarray(Sigma_v)] * (T - 1)))
        return cls(np.asarray(Phi, float), Sigma_pi, Sigma_u, int(T),
                   np.eye(2) if Psi is None else np.asarray(Psi, float))

    @property
    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.Phi))))

    def _check_stable(self):
        if self.spectral_radius >= 1.0:
            raise UnstableProcess(f"spectral radius of Phi is {self.spectral_radius:.4g} >= 1")

    @property
    def Gamma(self) -> np.ndarray:
        """Inverse of the lag-difference matrix: block (t, s) equals Phi^(t-s)."""
        self._check_stable()
        T = self.T
        out = np.zeros((2 * T, 2 * T))
        powers = [np.eye(2)]
        for _ in range(T - 1):
            powers.append(self.Phi @ powers[-1])
        for t in range(T):
            for s in range(t + 1):
                out[2 * t:2 * t + 2, 2 * s:2 * s + 2] = powers[t - s]
        return out

    @property
    def B(self) -> np.ndarray:
        T = self.T
        out = np.eye(2 * T)
        for t in range(1, T):
            out[2 * t:2 * t + 2, 2 * (t - 1):2 * t] = -self.Phi
        return out

    @property
    def J(self) -> np.ndarray:
        T = self.T
        I2 = np.eye(2)
        out = np.zeros((2 * T, 4))
        out[0:2, 0:2] = I2
        out[0:2, 2:4] = self.Psi
        for t in range(1, T):
            out[2 * t:2 * t + 2, 0:2] = I2 - self.Phi
            out[2 * t:2 * t + 2, 2:4] = I2 - self.Phi
        return out


def implied_sigma_closed_form(cf: RiclpmClosedForm) -> ImpliedCovariance:
    """Covariance of ``(x1, y1, ..., xT, yT)`` from the stacked RI-CLPM."""
    cf._check_stable()
    Gamma = cf.Gamma
    J = cf.J
    inner = J @ cf.Sigma_pi @ J.T + cf.Sigma_u
    return ImpliedCovariance.from_matrix(Gamma @ inner @ Gamma.T)
