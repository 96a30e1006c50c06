"""Independent reference computations shared by the test modules."""

import numpy as np

from panelwald.matrices import RiclpmClosedForm, build_ram
from panelwald.templates import riclpm


def _random_cov(rng, lo=0.5, hi=1.5, rmax=0.5):
    d = rng.uniform(lo, hi, 2)
    r = rng.uniform(-rmax, rmax)
    off = r * np.sqrt(d[0] * d[1])
    return np.array([[d[0], off], [off, d[1]]])


def random_riclpm(rng, T=4):
    """Random stable RI-CLPM as ``(ram, theta, closed_form)``."""
    while True:
        Phi = rng.uniform(-0.5, 0.6, (2, 2))
        if np.max(np.abs(np.linalg.eigvals(Phi))) < 0.95:
            break
    eta, eps, v = _random_cov(rng), _random_cov(rng), _random_cov(rng)
    ram = build_ram(riclpm(T).analysis_spec())
    vals = {"BX~~BX": eta[0, 0], "BY~~BY": eta[1, 1], "BX~~BY": eta[0, 1]}
    for t in range(1, T + 1):
        cov = eps if t == 1 else v
        vals[f"WFX{t}~~WFX{t}"] = cov[0, 0]
        vals[f"WFY{t}~~WFY{t}"] = cov[1, 1]
        vals[f"WFX{t}~~WFY{t}"] = cov[0, 1]
        if t > 1:
            vals[f"WFX{t}~WFX{t-1}"] = Phi[0, 0]
            vals[f"WFX{t}~WFY{t-1}"] = Phi[0, 1]
            vals[f"WFY{t}~WFX{t-1}"] = Phi[1, 0]
            vals[f"WFY{t}~WFY{t-1}"] = Phi[1, 1]
    theta = np.array([vals[n] for n in ram.param_names])
    cf = RiclpmClosedForm.from_blocks(Phi, eta, eps, v, T)
    return ram, theta, cf


def central_difference(f, x, h=1e-6):
    x = np.asarray(x, float)
    out = []
    for k in range(len(x)):
        e = np.zeros_like(x)
        e[k] = h
        out.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * h))
    return np.array(out)


def ml_f(sigma, S):
    """Direct evaluation of log|Sigma| - log|S| + tr(S Sigma^-1) - p."""
    p = len(S)
    return (np.linalg.slogdet(sigma)[1] - np.linalg.slogdet(S)[1]
            + np.trace(np.linalg.solve(sigma, S)) - p)
