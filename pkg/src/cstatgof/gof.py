"""Goodness-of-fit tests for Poisson models fitted by minimizing C.

Moment-based tests compare ``C(theta_hat)`` with a normal reference whose
mean and variance come from per-bin Poisson cumulants; resampling tests
build the reference by simulating from the fitted model and refitting.
Every test is one-sided: lack of fit inflates C.
"""

import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from scipy import stats

from . import cumulants as _cum
from . import rng as _rng
from .errors import BudgetWarning, DomainError, GofError, IllConditionedError
from .cstat import c_function
from .fitting import FitResult, fisher_information, fisher_solve, fit_many
from .models import ParameterVector

ALGORITHMS = (
    "lr-chi2",
    "naive-z-boot",
    "naive-z-highorder",
    "corrected-z-first",
    "corrected-z-high",
    "bootstrap",
    "double-bootstrap",
)
BOOTSTRAP_ALGORITHMS = ("naive-z-boot", "bootstrap", "double-bootstrap")

DEFAULT_B = 300
DEFAULT_B_DOUBLE = 300
#: Fraction of failed replicate refits above which a bootstrap is refused.
MAX_FAIL_FRACTION = 0.05
#: Total inner refits above which the double bootstrap warns.
FIT_BUDGET = 1_000_000


@dataclass(frozen=True)
class BootRecord:
    """Replicate values behind a resampling test.

    ``replicates`` holds ``C`` at each replicate's refit (NaN where the refit
    failed); ``failed`` lists the replicate indices that were dropped.
    """

    B: int
    seed: int
    replicates: tuple
    failed: tuple = ()

    def to_dict(self):
        return {"B": self.B, "seed": self.seed,
                "replicates": [None if math.isnan(v) else v for v in self.replicates],
                "failed": list(self.failed)}

    @classmethod
    def from_dict(cls, d):
        reps = tuple(float("nan") if v is None else float(v) for v in d["replicates"])
        return cls(int(d["B"]), int(d["seed"]), reps, tuple(int(i) for i in d["failed"]))


@dataclass(frozen=True)
class GofResult:
    """Outcome of one goodness-of-fit test."""

    algorithm: str
    statistic: float
    p_value: float
    ref_mean: Optional[float] = None
    ref_var: Optional[float] = None
    dof: Optional[int] = None
    q_form: Optional[float] = None
    boot: Optional[BootRecord] = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise DomainError(f"unknown algorithm {self.algorithm!r}")
        if not 0.0 <= self.p_value <= 1.0:
            raise DomainError(f"p-value {self.p_value} outside [0, 1]")
        if self.ref_var is not None and not self.ref_var > 0:
            raise DomainError("reference variance must be positive")

    def to_dict(self):
        return {
            "algorithm": self.algorithm,
            "statistic": self.statistic,
            "p_value": self.p_value,
            "ref_mean": self.ref_mean,
            "ref_var": self.ref_var,
            "dof": self.dof,
            "q_form": self.q_form,
            "boot": None if self.boot is None else self.boot.to_dict(),
            "diagnostics": dict(self.diagnostics),
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        boot = d.pop("boot", None)
        return cls(boot=None if boot is None else BootRecord.from_dict(boot), **d)


class MomentPair(NamedTuple):
    """Reference mean and variance for ``C(theta_hat)``."""

    mean: float
    var: float
    kind: str


def _theta_values(theta):
    if isinstance(theta, _Plug):
        return theta.theta
    if isinstance(theta, FitResult):
        return theta.theta_hat.values
    if isinstance(theta, ParameterVector):
        return theta.values
    return np.asarray(theta, dtype=float).reshape(-1)


class _Plug:
    """Model quantities evaluated at a fitted parameter vector."""

    def __init__(self, theta, model, cumulants=None):
        self.theta = _theta_values(theta)
        self.s, self.X, _ = model.evaluate(self.theta)
        self.n, self.d = self.X.shape
        self.cum = _cum.resolve(cumulants).columns(self.s)

    @classmethod
    def of(cls, theta, model, cumulants=None):
        return theta if isinstance(theta, cls) else cls(theta, model, cumulants)

    def fisher(self):
        return fisher_information(self.X, self.s, check=False)

    def kappa(self):
        return self.cum.k11 / self.s


def prepare(theta_hat, model, cumulants=None):
    """Evaluate rates, Jacobian and cumulants once for several moment tests.

    The returned object can be passed as ``theta_hat`` to any moment-based
    function in this module.
    """
    return _Plug.of(theta_hat, model, cumulants)


def unconditional_moments(theta_hat, model, d=None, cumulants=None):
    """Mean ``sum k1 - d`` and variance ``sum k2`` of ``C(theta_hat)``.

    ``d`` defaults to the number of model parameters; ``d=0`` gives the
    moments of ``C`` at a fully specified parameter.
    """
    plug = _Plug.of(theta_hat, model, cumulants)
    d = plug.d if d is None else int(d)
    return MomentPair(math.fsum(plug.cum.k1) - d, math.fsum(plug.cum.k2), "unconditional")


def _q_parts(plug):
    F = plug.fisher()
    b = plug.X.T @ plug.kappa()
    Fb = fisher_solve(F, b)
    return F, b, Fb


def quadratic_form_Q(theta_hat, model, cumulants=None, *, _plug=None):
    """``Q = kappa^T X (X^T V^-1 X)^-1 X^T kappa`` with ``kappa_i = k11_i / s_i``.

    It is the variance removed from ``sum k2`` by estimating ``theta``.
    """
    plug = _plug or _Plug.of(theta_hat, model, cumulants)
    if plug.d == 0:
        return 0.0
    _, b, Fb = _q_parts(plug)
    return max(float(b @ Fb), 0.0)


def conditional_moments(theta_hat, model, cumulants=None, contraction="trace", *,
                        _plug=None):
    """Mean and variance of ``C(theta_hat)`` conditional on ``theta_hat``.

    mean = sum k1 - 1/2 tr[(X^T V^-1 X)^-1 X^T Sigma X]
    var  = sum k2 - Q

    where ``Sigma = diag(k12/s^2 - r k03/s^3)`` and ``r = X F^-1 X^T kappa``.

    ``contraction="ones"`` sums every entry of ``X^T Sigma X F^-1`` instead
    of its trace.  That variant is not invariant to reparameterization and
    is kept only for comparison.
    """
    plug = _plug or _Plug.of(theta_hat, model, cumulants)
    c = plug.cum
    F, b, Fb = _q_parts(plug)
    Q = max(float(b @ Fb), 0.0)
    r = plug.X @ Fb
    sigma = c.k12 / plug.s ** 2 - r * c.k03 / plug.s ** 3
    if contraction == "trace":
        # tr(F^-1 X^T Sigma X) = sum_i Sigma_i h_i with h = diag(X F^-1 X^T)
        h = np.einsum("nd,dn->n", plug.X, fisher_solve(F, plug.X.T))
        shift = math.fsum(sigma * h)
    elif contraction == "ones":
        M = (plug.X * sigma[:, None]).T @ plug.X
        shift = float(np.sum(fisher_solve(F, M.T).T))
    else:
        raise DomainError(f"unknown contraction {contraction!r}")
    return MomentPair(math.fsum(c.k1) - 0.5 * shift, math.fsum(c.k2) - Q, "conditional")


def loglinear_conditional_moments(theta_hat, model, cumulants=None):
    """Conditional moments through the log-linear design ``log s = Z u``.

    With ``X = diag(s) Z`` the general formulas reduce to expressions in
    ``H = Z (Z^T diag(s) Z)^-1 Z^T``:

    mean = sum k1 - 1/2 sum_i (k12_i - (H k11)_i k03_i) H_ii
    var  = sum k2 - k11^T H k11
    """
    Z = model.loglinear_design()
    if Z is None:
        raise DomainError("model is not log-linear")
    plug = _Plug.of(theta_hat, model, cumulants)
    c = plug.cum
    W = (Z * plug.s[:, None]).T @ Z
    W = 0.5 * (W + W.T)
    Hk = Z @ fisher_solve(W, Z.T @ c.k11)
    Hdiag = np.einsum("nd,dn->n", Z, fisher_solve(W, Z.T))
    sigma = c.k12 - Hk * c.k03
    mean = math.fsum(c.k1) - 0.5 * math.fsum(sigma * Hdiag)
    var = math.fsum(c.k2) - max(float(c.k11 @ Hk), 0.0)
    return MomentPair(mean, var, "conditional")


def lr_chi2_test(c_min, n, d):
    """Upper tail of chi-square with ``n - d`` degrees of freedom at ``c_min``."""
    n, d = int(n), int(d)
    if n <= d:
        raise DomainError(f"need more bins than parameters (n={n}, d={d})")
    p = float(stats.chi2.sf(c_min, n - d))
    return GofResult("lr-chi2", float(c_min), min(max(p, 0.0), 1.0), dof=n - d)


def z_pvalue(c_min, mean, var):
    """One-sided normal p-value ``P(Z >= (c_min - mean) / sqrt(var))``."""
    if not var > 0:
        raise GofError(f"reference variance {var:.3g} is not positive; "
                       "use a bootstrap test for this dataset")
    return float(stats.norm.sf((c_min - mean) / math.sqrt(var)))


def _refuse_saturated(plug):
    if plug.n <= plug.d:
        raise GofError(f"model with {plug.d} parameters saturates {plug.n} bins; "
                       "there is nothing left to test")


def _z_result(name, c_min, mean, var, **extra):
    return GofResult(name, float(c_min), z_pvalue(c_min, mean, var), float(mean),
                     float(var), **extra)


def corrected_z_first(c_min, theta_hat, model, cumulants=None):
    """Z-test with mean ``sum k1`` and variance ``sum k2 - Q``."""
    plug = _Plug.of(theta_hat, model, cumulants)
    _refuse_saturated(plug)
    Q = quadratic_form_Q(None, model, _plug=plug)
    mean, var = math.fsum(plug.cum.k1), math.fsum(plug.cum.k2) - Q
    return _z_result("corrected-z-first", c_min, mean, var, q_form=Q)


def corrected_z_high(c_min, theta_hat, model, cumulants=None, contraction="trace"):
    """Z-test against the conditional moments of ``C(theta_hat)``.

    This is the recommended test for low-count data.
    """
    plug = _Plug.of(theta_hat, model, cumulants)
    _refuse_saturated(plug)
    Q = quadratic_form_Q(None, model, _plug=plug)
    mom = conditional_moments(None, model, contraction=contraction, _plug=plug)
    return _z_result("corrected-z-high", c_min, mom.mean, mom.var, q_form=Q,
                     diagnostics={"contraction": contraction})


def naive_z_highorder(c_min, theta_hat, model, cumulants=None, subtract_d=True):
    """Z-test with plug-in moments ``sum k1 (- d)`` and ``sum k2``.

    ``subtract_d=False`` drops the ``-d`` mean shift.
    """
    plug = _Plug.of(theta_hat, model, cumulants)
    _refuse_saturated(plug)
    mean = math.fsum(plug.cum.k1) - (plug.d if subtract_d else 0)
    var = math.fsum(plug.cum.k2)
    return _z_result("naive-z-highorder", c_min, mean, var,
                     diagnostics={"subtract_d": bool(subtract_d)})


def replicate_statistics(theta_hat, model, B, seed, key=(), chunk=512, refit=True):
    """Simulate ``B`` datasets at ``theta_hat``, refit each, return ``C`` values.

    Replicate ``b`` draws from the stream ``(seed, *key, b)`` and refits from
    ``theta_hat``, so the output does not depend on ``chunk``.  Failed
    refits give NaN.  With ``refit=False`` each replicate's ``C`` is taken
    at ``theta_hat`` itself.
    """
    theta = _theta_values(theta_hat)
    s = model.evaluate(theta)[0]
    out = np.empty(B)
    thetas = np.empty((B, model.d))
    for start in range(0, B, chunk):
        idx = range(start, min(B, start + chunk))
        gens = [_rng.stream(seed, *key, b) for b in idx]
        N = _rng.poisson_rows(gens, s)
        if not refit:
            out[start:start + len(gens)] = [c_function(row, s).total for row in N]
            thetas[start:start + len(gens)] = theta
            continue
        fit = fit_many(N, model, theta)
        out[start:start + len(gens)] = np.where(fit.converged, fit.c_min, np.nan)
        thetas[start:start + len(gens)] = fit.theta
    return out, thetas


def _checked(reps, seed, B, label):
    failed = tuple(int(i) for i in np.flatnonzero(np.isnan(reps)))
    if len(failed) > MAX_FAIL_FRACTION * B:
        raise GofError(f"{label}: {len(failed)} of {B} replicate refits failed "
                       f"(seed {seed}, replicates {list(failed)[:20]})")
    good = reps[~np.isnan(reps)]
    if good.size == 0:
        raise GofError(f"{label}: no replicate refit succeeded")
    return good, BootRecord(B, int(seed), tuple(float(v) for v in reps), failed)


def _require_seed(seed):
    if seed is None:
        raise DomainError("resampling tests need an explicit seed")
    return int(seed)


def naive_z_boot(c_min, theta_hat, model, B=DEFAULT_B, seed=None):
    """Z-test against the sample mean and variance of bootstrap ``C`` values."""
    seed = _require_seed(seed)
    if B < 2:
        raise DomainError("need B >= 2")
    reps, _ = replicate_statistics(theta_hat, model, B, seed, (_rng.BOOTSTRAP,))
    good, record = _checked(reps, seed, B, "naive-z-boot")
    mean = math.fsum(good) / good.size
    var = math.fsum((good - mean) ** 2) / (good.size - 1) if good.size > 1 else 0.0
    if not var > 0:
        raise GofError("bootstrap C values have zero variance")
    return _z_result("naive-z-boot", c_min, mean, var, boot=record)


def parametric_bootstrap(c_min, theta_hat, model, B=DEFAULT_B, seed=None, add_one=False,
                         refit=True):
    """Fraction of bootstrap replicates with ``C >= c_min``.

    ``add_one`` reports ``(1 + count) / (1 + B)`` instead.  ``refit=False``
    tests a fully specified parameter: replicates are not refitted.
    """
    seed = _require_seed(seed)
    if B < 1:
        raise DomainError("need B >= 1")
    reps, _ = replicate_statistics(theta_hat, model, B, seed, (_rng.BOOTSTRAP,), refit=refit)
    good, record = _checked(reps, seed, B, "bootstrap")
    hits = int(np.count_nonzero(good >= c_min))
    p = (hits + 1) / (good.size + 1) if add_one else hits / good.size
    return GofResult("bootstrap", float(c_min), p, boot=record,
                     diagnostics={"add_one": bool(add_one), "refit": bool(refit)})


def double_bootstrap(c_min, theta_hat, model, B1=DEFAULT_B_DOUBLE, B2=DEFAULT_B_DOUBLE,
                     seed=None, budget=FIT_BUDGET):
    """Bootstrap p-value recalibrated by a second bootstrap level.

    Each outer replicate ``j`` (refit ``theta_j``, statistic ``C_j``) gets an
    inner p-value from ``B2`` datasets simulated at ``theta_j``; the adjusted
    p-value is the fraction of inner p-values at or below the outer one.
    """
    seed = _require_seed(seed)
    if B1 < 1 or B2 < 1:
        raise DomainError("need B1 >= 1 and B2 >= 1")
    if B1 * B2 > budget:
        warnings.warn(f"double bootstrap needs {B1 * B2} refits, above the budget of "
                      f"{budget}", BudgetWarning, stacklevel=2)
    outer, thetas = replicate_statistics(theta_hat, model, B1, seed, (_rng.BOOTSTRAP,))
    good, record = _checked(outer, seed, B1, "double-bootstrap outer")
    p_hat = float(np.count_nonzero(good >= c_min)) / good.size
    inner_p = []
    inner_failed = 0
    for j in np.flatnonzero(~np.isnan(outer)):
        reps, _ = replicate_statistics(thetas[j], model, B2, seed, (_rng.DOUBLE_INNER, int(j)))
        ok = reps[~np.isnan(reps)]
        inner_failed += reps.size - ok.size
        if ok.size:
            inner_p.append(np.count_nonzero(ok >= outer[j]) / ok.size)
    if inner_failed > MAX_FAIL_FRACTION * B2 * good.size:
        raise GofError(f"double-bootstrap: {inner_failed} inner refits failed (seed {seed})")
    inner_p = np.asarray(inner_p)
    p_adj = float(np.count_nonzero(inner_p <= p_hat)) / inner_p.size
    return GofResult("double-bootstrap", float(c_min), p_adj, boot=record,
                     diagnostics={"p_single": p_hat, "B2": int(B2),
                                  "inner_failed": int(inner_failed)})


def run_test(method, fit, model, *, cumulants=None, B=DEFAULT_B, B1=DEFAULT_B_DOUBLE,
             B2=DEFAULT_B_DOUBLE, seed=None, subtract_d=True):
    """Dispatch ``method`` on a :class:`FitResult`."""
    c = fit.c_min
    if method == "lr-chi2":
        return lr_chi2_test(c, model.n, model.d)
    if method == "corrected-z-first":
        return corrected_z_first(c, fit, model, cumulants)
    if method == "corrected-z-high":
        return corrected_z_high(c, fit, model, cumulants)
    if method == "naive-z-highorder":
        return naive_z_highorder(c, fit, model, cumulants, subtract_d=subtract_d)
    if method == "naive-z-boot":
        return naive_z_boot(c, fit, model, B, seed)
    if method == "bootstrap":
        return parametric_bootstrap(c, fit, model, B, seed)
    if method == "double-bootstrap":
        return double_bootstrap(c, fit, model, B1, B2, seed)
    raise DomainError(f"unknown method {method!r}; choose from {', '.join(ALGORITHMS)}")
