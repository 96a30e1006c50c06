"""Chi-square tail probabilities."""

import numpy as np
from scipy import special


def chi2_sf(x, df):
    """Upper tail 1 - CDF of a chi-square variate via the regularized gamma function.

    ``df == 0`` is treated as a point mass at zero.
    """
    x = np.asarray(x, dtype=float)
    if df == 0:
        out = np.where(x <= 0, 1.0, 0.0)
    else:
        out = special.gammaincc(0.5 * df, np.maximum(x, 0.0) * 0.5)
    return float(out) if out.ndim == 0 else out


def chi2_cdf(x, df):
    x = np.asarray(x, dtype=float)
    if df == 0:
        out = np.where(x <= 0, 0.0, 1.0)
    else:
        out = special.gammainc(0.5 * df, np.maximum(x, 0.0) * 0.5)
    return float(out) if out.ndim == 0 else out


def chi2_ppf(q, df):
    """Quantile of the chi-square distribution."""
    return float(2.0 * special.gammaincinv(0.5 * df, q))
