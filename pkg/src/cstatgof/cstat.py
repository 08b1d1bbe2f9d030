"""The C (Cash) statistic, its per-bin terms and its parameter gradient.

Per bin the statistic is twice the Poisson deviance,

    C_i = 2 [s - N log s - N + N log N],   with 0 log 0 = 0,

which is non-negative and vanishes only at ``N == s``.
"""

import math
from typing import NamedTuple

import numpy as np

from .errors import DomainError

# Series for (1+x) log(1+x) - x = sum_{k>=2} (-1)^k x^k / (k (k-1)), used
# for |x| < _SERIES_RADIUS where the closed form loses digits to cancellation.
_SERIES_RADIUS = 0.1
_SERIES_COEF = np.array([(-1.0) ** k / (k * (k - 1)) for k in range(2, 20)])


def _phi_series(x):
    acc = np.zeros_like(x)
    for c in _SERIES_COEF[::-1]:
        acc = acc * x + c
    return acc * x * x


def _half_terms(N, s):
    """``C_i / 2`` evaluated without cancellation near ``N == s``."""
    N = np.asarray(N, dtype=float)
    s = np.asarray(s, dtype=float)
    N, s = np.broadcast_arrays(N, s)
    out = np.empty(N.shape)
    zero = N == 0
    out[zero] = s[zero]
    nz = ~zero
    Nn, sn = N[nz], s[nz]
    x = (Nn - sn) / sn
    near = np.abs(x) < _SERIES_RADIUS
    res = np.empty(Nn.shape)
    res[near] = sn[near] * _phi_series(x[near])
    far = ~near
    res[far] = Nn[far] * np.log(Nn[far] / sn[far]) + (sn[far] - Nn[far])
    out[nz] = np.maximum(res, 0.0)
    return out


def _check(N, s):
    N = np.asarray(N)
    s = np.asarray(s, dtype=float)
    if np.any(~np.isfinite(s)) or np.any(s <= 0):
        raise DomainError("expected counts must be positive and finite")
    if np.any(N < 0):
        raise DomainError("counts must be non-negative")
    return N, s


def c_per_bin(N, s):
    """Per-bin C term ``2 [s - N log s - N + N log N]``.

    Accepts scalars or broadcastable arrays.  Returns a float for scalar
    input and an array otherwise.

    Examples
    --------
    >>> round(c_per_bin(2, 1.0), 7)
    0.7725887
    """
    N, s = _check(N, s)
    out = 2.0 * _half_terms(N, s)
    if out.ndim == 0:
        return float(out)
    return out


class CValue(NamedTuple):
    """Total C value together with its per-bin contributions."""

    total: float
    per_bin: np.ndarray


def _counts_of(data):
    counts = getattr(data, "counts", data)
    return np.asarray(counts)


def c_function(data, s):
    """Evaluate ``C`` for observed counts and expected counts ``s``.

    Parameters
    ----------
    data : BinnedDataset or array of counts
    s : array of positive expected counts, same length

    Returns
    -------
    CValue
        The total is accumulated with exactly rounded summation.
    """
    N = _counts_of(data)
    s = np.asarray(s, dtype=float)
    if N.shape != s.shape:
        raise DomainError(f"length mismatch: {N.size} counts vs {s.size} rates")
    per_bin = c_per_bin(N, s)
    per_bin = np.atleast_1d(per_bin)
    return CValue(math.fsum(per_bin), per_bin)


def c_gradient(data, s, X):
    """Gradient of ``C`` with respect to the parameters, ``2 X^T (1 - N/s)``."""
    N = _counts_of(data)
    N, s = _check(N, s)
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] != s.size or N.shape != s.shape:
        raise DomainError("counts, rates and Jacobian rows must match")
    return 2.0 * (X.T @ (1.0 - N / s))


def score(data, s, X):
    """Poisson log-likelihood score ``X^T (N/s - 1)``."""
    N = _counts_of(data)
    N, s = _check(N, s)
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] != s.size or N.shape != s.shape:
        raise DomainError("counts, rates and Jacobian rows must match")
    return X.T @ (N / s - 1.0)
