"""Maximum-likelihood fitting by minimizing the C statistic.

The optimizer works in transformed coordinates ``u`` (``log theta`` for
positive parameters) and takes projected Fisher-scoring steps with an
Armijo backtracking line search.  For log-linear models in their native
transforms the Fisher matrix equals the Hessian, so the iteration is
Newton's method on a convex objective.  Rows that stall fall back to
L-BFGS-B.

:func:`fit_many` fits a stack of datasets against one model in a single
vectorized pass; :func:`fit_mle` is a thin multistart wrapper around it,
so a single fit and a batched refit of the same data agree exactly.
"""

import math
import warnings
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from scipy import linalg as sla
from scipy import optimize

from .cstat import c_function
from .errors import BoundaryWarning, DomainError, FitError, IllConditionedError
from .models import BinnedDataset, ParameterVector, SpectralModel

TOL_GRAD = 1e-8
MAX_ITER = 500
COND_LIMIT = 1e12

_ARMIJO = 1e-4
_MAX_HALVINGS = 60
_MAX_STEP = 10.0
_BOUND_ATOL = 1e-8
_F_NOISE = 1e-12
_TINY = 1e-300
_NOISE_ULPS = 64


def fisher_information(X, V, check=True):
    """Fisher information ``X^T V^-1 X`` for Poisson counts.

    Parameters
    ----------
    X : (n, d) array
        Jacobian of the expected counts.
    V : (n,) array or (n, n) diagonal array
        Expected counts (the Poisson variances).
    check : bool
        Raise :class:`IllConditionedError` when the scale-free condition
        number exceeds ``1e12``.
    """
    X = np.asarray(X, dtype=float)
    V = np.asarray(V, dtype=float)
    if V.ndim == 2:
        if V.shape[0] != V.shape[1] or np.any(V - np.diag(np.diag(V))):
            raise DomainError("V must be diagonal")
        V = np.diag(V)
    if X.ndim != 2 or X.shape[0] != V.size:
        raise DomainError("X rows must match the length of V")
    if np.any(V <= 0) or not np.all(np.isfinite(V)):
        raise DomainError("V must be positive")
    F = (X / V[:, None]).T @ X
    F = 0.5 * (F + F.T)
    if check:
        condition_check(F)
    return F


def condition_check(F):
    """Raise unless ``F`` is safely positive definite after diagonal scaling."""
    diag = np.diag(F)
    if np.any(~np.isfinite(F)) or np.any(diag <= 0):
        raise IllConditionedError(
            "Fisher information is singular; some parameter does not affect "
            "the expected counts; fix it or reparameterize the model")
    scale = 1.0 / np.sqrt(diag)
    cond = np.linalg.cond(F * np.outer(scale, scale))
    if not cond < COND_LIMIT:
        raise IllConditionedError(
            f"Fisher information condition number {cond:.3g} exceeds "
            f"{COND_LIMIT:.0e}; reparameterize the model")
    return cond


def fisher_solve(F, B):
    """Solve ``F Y = B`` by Cholesky after a condition check."""
    condition_check(F)
    try:
        factor = sla.cho_factor(F, lower=True)
    except np.linalg.LinAlgError as exc:
        raise IllConditionedError("Fisher information is not positive definite") from exc
    return sla.cho_solve(factor, B)


@dataclass(frozen=True)
class FitResult:
    """Outcome of a C-statistic minimization.

    ``s_hat`` and ``X_hat`` hold the expected counts and their Jacobian at
    ``theta_hat``; ``at_bound`` flags parameters pinned at a box bound.
    """

    theta_hat: ParameterVector
    c_min: float
    fisher: np.ndarray
    n_iter: int
    converged: bool
    grad_norm: float
    at_bound: tuple
    s_hat: np.ndarray
    X_hat: np.ndarray

    @property
    def d(self):
        return len(self.theta_hat)

    def to_dict(self):
        return {
            "theta_hat": self.theta_hat.as_dict(),
            "c_min": self.c_min,
            "fisher": self.fisher.tolist(),
            "n_iter": self.n_iter,
            "converged": self.converged,
            "grad_norm": self.grad_norm,
            "at_bound": list(self.at_bound),
        }


class BatchFit(NamedTuple):
    """Per-row results of :func:`fit_many`."""

    theta: np.ndarray
    c_min: np.ndarray
    converged: np.ndarray
    n_iter: np.ndarray
    grad_norm: np.ndarray
    at_bound: np.ndarray


class _Problem:
    """C-statistic objective over transformed coordinates for one model."""

    def __init__(self, model: SpectralModel, log_domain):
        self.model = model
        self.log = np.asarray(log_domain, dtype=bool)
        lo = np.array([b[0] for b in model.bounds], dtype=float)
        hi = np.array([b[1] for b in model.bounds], dtype=float)
        self.lo = np.where(self.log, np.log(np.where(self.log, lo, 1.0)), lo)
        self.hi = np.where(self.log, np.log(np.where(self.log, hi, 1.0)), hi)
        Z = model.loglinear_design()
        native = tuple(bool(x) for x in model.log_domain) == tuple(self.log.tolist())
        self.Z = None if Z is None or not native else np.asarray(Z, dtype=float)

    def to_theta(self, U):
        return np.where(self.log, np.exp(U), U)

    def to_u(self, theta):
        theta = np.asarray(theta, dtype=float)
        return np.where(self.log, np.log(np.where(self.log, theta, 1.0)), theta)

    # The optimizer works on unclamped rates.  Clamping at the model floor would
    # flatten C wherever every rate is floored and stall the search there.

    def rates(self, U):
        return self.rates_jac(U, jac=False)[0]

    def rates_jac(self, U, jac=True):
        """Rates ``(m, n)`` and Jacobian in ``u`` coordinates ``(m, n, d)``."""
        if self.Z is not None:
            s = np.exp(np.einsum("md,nd->mn", U, self.Z))
            J = s[:, :, None] * self.Z[None, :, :] if jac else None
            return np.maximum(s, _TINY), J
        T = self.to_theta(U)
        s = np.stack([self.model._rates(t) for t in T])
        bad = ~(s > _TINY)
        s = np.where(bad, _TINY, s)
        if not jac:
            return s, None
        X = np.stack([self.model._jacobian(t) for t in T])
        X = np.where(bad[:, :, None], 0.0, X)
        dtheta = np.where(self.log, T, 1.0)
        return s, X * dtheta[:, None, :]

    @staticmethod
    def objective(N, s):
        # C without the data-only constant 2 sum(N log N - N)
        return 2.0 * np.sum(s - N * np.log(s), axis=-1)


def _c_constant(N):
    N = np.asarray(N, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(N > 0, N * np.log(np.where(N > 0, N, 1.0)) - N, 0.0)
    return 2.0 * np.sum(t, axis=-1)


def _grad_hess(N, s, J):
    w = 1.0 - N / s
    g = 2.0 * np.einsum("mnd,mn->md", J, w)
    H = 2.0 * np.einsum("mnd,mne->mde", J / s[:, :, None], J)
    return g, H


def _newton_step(g, H, free):
    m, d = g.shape
    gf = np.where(free, g, 0.0)
    mask = free[:, :, None] & free[:, None, :]
    Hf = np.where(mask, H, 0.0)
    diag = np.einsum("mii->mi", Hf).copy()
    top = np.max(np.abs(diag), axis=1, keepdims=True)
    degenerate = (~free) | (diag <= 1e-300 + 1e-14 * top)
    eye = np.eye(d)[None]
    Hf = Hf + eye * np.where(degenerate, 1.0, 1e-12 * diag)[:, None, :]
    try:
        p = -np.linalg.solve(Hf, gf[:, :, None])[:, :, 0]
    except np.linalg.LinAlgError:
        p = np.stack([-np.linalg.lstsq(h, v, rcond=None)[0] for h, v in zip(Hf, gf)])
    p = np.where(free, p, 0.0)
    big = np.max(np.abs(p), axis=1, keepdims=True)
    return p * np.minimum(1.0, _MAX_STEP / np.maximum(big, 1e-300))


def _active(U, g, prob):
    at_lo = (U <= prob.lo + _BOUND_ATOL) & (g > 0)
    at_hi = (U >= prob.hi - _BOUND_ATOL) & (g < 0)
    return ~(at_lo | at_hi)


def _grad_norms(U, g, free, prob):
    """Projected gradient sup-norms in native and transformed coordinates."""
    T = prob.to_theta(U)
    g_theta = np.where(prob.log, g / np.where(prob.log, T, 1.0), g)
    g_theta = np.where(free, g_theta, 0.0)
    g_u = np.where(free, g, 0.0)
    return np.max(np.abs(g_theta), axis=1), np.max(np.abs(g_u), axis=1)


def _native_ok(U, g, free, N, s, J, prob, tol):
    """Native-gradient test per row, allowing for rounding noise.

    For a log-domain parameter near zero the native gradient ``g_u / theta``
    amplifies the rounding error of ``g_u``.  A component passes when it is
    below ``tol`` or when ``g_u`` is already at its rounding level.
    """
    T = prob.to_theta(U)
    g_theta = np.abs(np.where(prob.log, g / np.where(prob.log, T, 1.0), g))
    noise = _NOISE_ULPS * np.finfo(float).eps * 2.0 * np.einsum(
        "mnd,mn->md", np.abs(J), 1.0 + N / s)
    ok = (g_theta < tol[:, None]) | (np.abs(g) <= noise) | ~free
    return ok.all(axis=1)


def _fd_hessian(N, U, prob, H_fisher):
    """Hessian of the objective in ``u`` from central differences of the gradient.

    Rows where the result is not positive definite keep ``H_fisher``.
    """
    m, d = U.shape
    H = np.empty((m, d, d))
    h = 1e-5 * (1.0 + np.abs(U))
    for k in range(d):
        e = np.zeros(d)
        e[k] = 1.0
        up, dn = U + h[:, k:k + 1] * e, U - h[:, k:k + 1] * e
        g_up = _grad_hess(N, *prob.rates_jac(up))[0]
        g_dn = _grad_hess(N, *prob.rates_jac(dn))[0]
        H[:, :, k] = (g_up - g_dn) / (2.0 * h[:, k:k + 1])
    H = 0.5 * (H + np.swapaxes(H, 1, 2))
    for r in range(m):
        try:
            np.linalg.cholesky(H[r])
        except np.linalg.LinAlgError:
            H[r] = H_fisher[r]
    return H


def _newton(N, U, prob, const, tol_grad, max_iter, exact=False):
    """Run projected scoring iterations on all rows; returns per-row state.

    With ``exact`` the step uses the observed Hessian where it is positive
    definite.  Scoring converges only linearly when the Fisher matrix is far
    from the Hessian, as in sparse data under a non-log-linear model.
    """
    m = U.shape[0]
    U = np.clip(U, prob.lo, prob.hi)
    s, J = prob.rates_jac(U)
    f = prob.objective(N, s)
    n_iter = np.zeros(m, dtype=np.int64)
    done = np.zeros(m, dtype=bool)
    stalled = np.zeros(m, dtype=bool)
    gnorm = np.full(m, np.inf)
    for _ in range(max_iter + 1):
        rows = np.flatnonzero(~done & ~stalled)
        if rows.size == 0:
            break
        Ur, Nr, sr, Jr = U[rows], N[rows], s[rows], J[rows]
        g, H = _grad_hess(Nr, sr, Jr)
        free = _active(Ur, g, prob)
        gt, gu = _grad_norms(Ur, g, free, prob)
        gnorm[rows] = gt
        tol = tol_grad * (1.0 + np.abs(f[rows] + const[rows]))
        ok = _native_ok(Ur, g, free, Nr, sr, Jr, prob, tol) & (gu < tol)
        done[rows[ok]] = True
        keep = ~ok & (n_iter[rows] < max_iter)
        stalled[rows[~ok & ~keep]] = True
        rows, Ur, Nr, g, H, free = rows[keep], Ur[keep], Nr[keep], g[keep], H[keep], free[keep]
        if rows.size == 0:
            break
        if exact and prob.Z is None:
            H = _fd_hessian(Nr, Ur, prob, H)
        p = _newton_step(g, H, free)
        fr = f[rows]
        alpha = np.ones(rows.size)
        pending = np.arange(rows.size)
        Unew = Ur.copy()
        fnew = fr.copy()
        for _h in range(_MAX_HALVINGS):
            trial = np.clip(Ur[pending] + alpha[pending, None] * p[pending], prob.lo, prob.hi)
            ft = prob.objective(Nr[pending], prob.rates(trial))
            decrease = np.einsum("md,md->m", g[pending], trial - Ur[pending])
            # near the optimum the decrease drops below rounding noise in f
            noise = _F_NOISE * (1.0 + np.abs(fr[pending]))
            accept = np.isfinite(ft) & (ft <= fr[pending] + _ARMIJO * decrease + noise)
            Unew[pending[accept]] = trial[accept]
            fnew[pending[accept]] = ft[accept]
            pending = pending[~accept]
            if pending.size == 0:
                break
            alpha[pending] *= 0.5
        if pending.size:
            stalled[rows[pending]] = True
        moved = np.setdiff1d(np.arange(rows.size), pending)
        mr = rows[moved]
        U[mr] = Unew[moved]
        f[mr] = fnew[moved]
        n_iter[mr] += 1
        if mr.size:
            s_new, J_new = prob.rates_jac(U[mr])
            s[mr] = s_new
            J[mr] = J_new
    return U, f, n_iter, done, gnorm


def _lbfgs(N, u0, prob, tol_grad):
    def fun(u):
        s, J = prob.rates_jac(u[None])
        val = prob.objective(N[None], s)[0]
        g = 2.0 * np.einsum("nd,n->d", J[0], 1.0 - N / s[0])
        return val, g

    res = optimize.minimize(fun, u0, jac=True, method="L-BFGS-B",
                            bounds=list(zip(prob.lo, prob.hi)),
                            options={"maxiter": 2000, "ftol": 1e-15, "gtol": 1e-12})
    return np.clip(res.x, prob.lo, prob.hi), int(res.nit)


def fit_many(counts, model, init, *, log_domain=None, tol_grad=TOL_GRAD,
             max_iter=MAX_ITER):
    """Fit every row of ``counts`` against ``model``.

    Parameters
    ----------
    counts : (m, n) array of non-negative integers
    model : SpectralModel
    init : (d,) or (m, d) array of starting values in native coordinates
    log_domain : sequence of bool, optional
        Optimizer transforms; defaults to the model's.

    Returns
    -------
    BatchFit
        Rows that fail to converge are flagged, never raised.
    """
    N = np.atleast_2d(np.asarray(counts, dtype=float))
    if N.shape[1] != model.n:
        raise DomainError(f"counts have {N.shape[1]} channels, model has {model.n}")
    m, d = N.shape[0], model.d
    prob = _Problem(model, model.log_domain if log_domain is None else log_domain)
    theta0 = np.broadcast_to(np.asarray(init, dtype=float), (m, d))
    U0 = prob.to_u(np.clip(theta0, [b[0] for b in model.bounds], [b[1] for b in model.bounds]))
    const = _c_constant(N)
    U, f, n_iter, done, gnorm = _newton(N, U0.copy(), prob, const, tol_grad, max_iter)
    for r in np.flatnonzero(~done):
        u, extra = _lbfgs(N[r], U[r], prob, tol_grad)
        Ur, fr, it, ok, gn = _newton(N[r:r + 1], u[None], prob, const[r:r + 1],
                                     tol_grad, max_iter, exact=True)
        if fr[0] <= f[r]:
            U[r], f[r], done[r], gnorm[r] = Ur[0], fr[0], ok[0], gn[0]
        n_iter[r] += extra + it[0]
    theta = prob.to_theta(U)
    at_bound = (U <= prob.lo + _BOUND_ATOL) | (U >= prob.hi - _BOUND_ATOL)
    return BatchFit(theta, f + const, done, n_iter, gnorm, at_bound)


def _start_points(theta0, model, multistart):
    lo = np.array([b[0] for b in model.bounds])
    hi = np.array([b[1] for b in model.bounds])
    starts = [theta0]
    if multistart:
        starts += [theta0 * 2.0, theta0 * 0.5]
    return np.clip(np.array(starts), lo, hi)


def fit_mle(dataset, model, init=None, *, multistart=True, tol_grad=TOL_GRAD,
            max_iter=MAX_ITER, warn=True):
    """Minimize ``C`` over the model parameters.

    Parameters
    ----------
    dataset : BinnedDataset
    model : SpectralModel
    init : ParameterVector or array, optional
        Starting point; its ``log_domain`` flags (if a ParameterVector)
        select the optimizer transforms.  Defaults to
        ``model.initial_guess``.
    multistart : bool
        Also start from ``2 * init`` and ``init / 2`` and keep the best.

    Raises
    ------
    FitError
        No start reached a stationary point; ``.best`` holds the lowest-C
        iterate.
    """
    counts = dataset.counts if isinstance(dataset, BinnedDataset) else np.asarray(dataset)
    if counts.size != model.n:
        raise DomainError(f"dataset has {counts.size} channels, model has {model.n}")
    log_domain = model.log_domain
    if init is None:
        theta0 = np.asarray(model.initial_guess(counts), dtype=float)
    elif isinstance(init, ParameterVector):
        theta0 = init.check().values
        log_domain = init.log_domain
    else:
        theta0 = model.parameters(np.asarray(init, dtype=float)).check().values
    starts = _start_points(theta0, model, multistart)
    rows = np.broadcast_to(counts, (len(starts), counts.size))
    batch = fit_many(rows, model, starts, log_domain=log_domain, tol_grad=tol_grad,
                     max_iter=max_iter)
    # lowest C among converged starts, ties broken by the smallest theta
    order = sorted(range(len(starts)), key=lambda k: (
        not batch.converged[k], batch.c_min[k], tuple(batch.theta[k])))
    k = order[0]
    result = _result(dataset, counts, model, batch.theta[k], bool(batch.converged[k]),
                     int(batch.n_iter.sum()), float(batch.grad_norm[k]),
                     tuple(bool(x) for x in batch.at_bound[k]), log_domain)
    if not result.converged:
        raise FitError(f"no start converged within {max_iter} iterations "
                       f"(gradient norm {result.grad_norm:.3g})", best=result)
    if warn and any(result.at_bound):
        pinned = [n for n, b in zip(model.names, result.at_bound) if b]
        warnings.warn(f"parameters at a bound: {pinned}", BoundaryWarning, stacklevel=2)
    return result


def _result(dataset, counts, model, theta, converged, n_iter, grad_norm, at_bound,
            log_domain):
    s, X, _ = model.evaluate(theta)
    c = c_function(counts, s).total
    params = model.parameters(theta).with_transforms(log_domain)
    return FitResult(params, c, fisher_information(X, s, check=False), n_iter,
                     converged, grad_norm, at_bound, s, X)
