"""Channel grids, instrument responses and parametric spectral models.

A model maps a parameter vector ``theta`` to a vector of expected counts
``s(theta)`` over ``n`` channels, together with the ``n x d`` Jacobian
``X`` whose row ``i`` is the gradient of ``s_i``.
"""

import math
import warnings
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from . import rng as _rng
from .errors import DomainError, FloorClampWarning, ModelViolationError

#: Lower bound on any expected count.  Rates below it are clamped.
EPS_FLOOR = 1e-10


def channel_edges(n, lo=1.0, hi=2.0):
    """Edges of ``n`` equal-width channels spanning ``[lo, hi]``.

    With the defaults the upper edge of channel ``i`` (1-based) is
    ``1 + i/n``.
    """
    if n < 1:
        raise DomainError("need at least one channel")
    return lo + (hi - lo) * np.arange(n + 1) / n


@dataclass(frozen=True)
class BinnedDataset:
    """Observed counts per channel.

    Parameters
    ----------
    counts : array of non-negative int
    edges : array of ``n + 1`` strictly increasing floats
    exposure : float
        Exposure time; only folded models use it.
    background : array of ``n`` non-negative floats, optional
        Expected background counts per channel.
    """

    counts: np.ndarray
    edges: np.ndarray
    exposure: float = 1.0
    background: Optional[np.ndarray] = None

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 1 or counts.size < 1:
            raise DomainError("counts must be a non-empty 1-D array")
        if not np.all(np.isfinite(counts)) or np.any(counts < 0):
            raise DomainError("counts must be finite and non-negative")
        if np.any(counts != np.round(counts)):
            raise DomainError("counts must be integers")
        counts = counts.astype(np.int64)
        edges = np.asarray(self.edges, dtype=float)
        if edges.shape != (counts.size + 1,):
            raise DomainError(
                f"expected {counts.size + 1} edges, got {edges.size}")
        if np.any(np.diff(edges) <= 0):
            raise DomainError("edges must be strictly increasing")
        if not (self.exposure > 0 and math.isfinite(self.exposure)):
            raise DomainError("exposure must be positive")
        bkg = self.background
        if bkg is not None:
            bkg = np.asarray(bkg, dtype=float)
            if bkg.shape != counts.shape:
                raise DomainError("background length must equal channel count")
            if np.any(bkg < 0) or not np.all(np.isfinite(bkg)):
                raise DomainError("background must be finite and non-negative")
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "exposure", float(self.exposure))
        object.__setattr__(self, "background", bkg)

    @property
    def n(self):
        return self.counts.size

    @classmethod
    def on_grid(cls, counts, lo=1.0, hi=2.0, **kw):
        counts = np.asarray(counts)
        return cls(counts, channel_edges(counts.size, lo, hi), **kw)

    def with_counts(self, counts):
        return BinnedDataset(counts, self.edges, self.exposure, self.background)

    def __eq__(self, other):
        if not isinstance(other, BinnedDataset):
            return NotImplemented
        same_bkg = (self.background is None and other.background is None) or (
            self.background is not None and other.background is not None
            and np.array_equal(self.background, other.background))
        return (np.array_equal(self.counts, other.counts)
                and np.array_equal(self.edges, other.edges)
                and self.exposure == other.exposure and same_bkg)


@dataclass(frozen=True)
class InstrumentResponse:
    """Redistribution matrix and effective area on a model energy grid.

    ``rmf[j, i]`` is the probability that a photon in model bin ``j`` is
    recorded in channel ``i``; ``area[j]`` is the effective area of model
    bin ``j`` and ``model_edges`` holds the ``J + 1`` model bin edges.
    """

    rmf: np.ndarray
    area: np.ndarray
    model_edges: np.ndarray

    def __post_init__(self):
        rmf = np.asarray(self.rmf, dtype=float)
        area = np.asarray(self.area, dtype=float)
        edges = np.asarray(self.model_edges, dtype=float)
        if rmf.ndim != 2:
            raise DomainError("rmf must be a J x n matrix")
        J = rmf.shape[0]
        if area.shape != (J,):
            raise DomainError(f"area must have {J} entries")
        if edges.shape != (J + 1,) or np.any(np.diff(edges) <= 0):
            raise DomainError(f"model_edges must be {J + 1} increasing values")
        if np.any(rmf < 0) or np.any(rmf > 1):
            raise DomainError("rmf entries must lie in [0, 1]")
        if np.any(rmf.sum(axis=1) > 1 + 1e-12):
            raise DomainError("rmf rows must sum to at most 1")
        if np.any(area < 0):
            raise DomainError("area must be non-negative")
        object.__setattr__(self, "rmf", rmf)
        object.__setattr__(self, "area", area)
        object.__setattr__(self, "model_edges", edges)

    @property
    def n_channels(self):
        return self.rmf.shape[1]

    @property
    def midpoints(self):
        return 0.5 * (self.model_edges[:-1] + self.model_edges[1:])

    @property
    def widths(self):
        return np.diff(self.model_edges)


def identity_response(n, lo=1.0, hi=2.0):
    """Perfect-resolution response with unit area."""
    return InstrumentResponse(np.eye(n), np.ones(n), channel_edges(n, lo, hi))


def tridiagonal_response(n, lo=1.0, hi=2.0, leak=0.1):
    """Near-diagonal response: each photon leaks to its neighbours.

    Interior rows are ``(leak, 1 - 2 leak, leak)``; the two edge rows keep
    ``1 - leak`` on the diagonal so every row sums to one.
    """
    R = np.zeros((n, n))
    idx = np.arange(n)
    R[idx, idx] = 1 - 2 * leak
    R[idx[:-1], idx[:-1] + 1] = leak
    R[idx[1:], idx[1:] - 1] = leak
    R[0, 0] = R[-1, -1] = 1 - leak
    if n == 1:
        R[0, 0] = 1.0
    return InstrumentResponse(R, np.ones(n), channel_edges(n, lo, hi))


def dispersed_response(n, lo=1.0, hi=2.0):
    """Response ``(11^T + nI) / 2n``: half the mass stays on the diagonal."""
    R = (np.ones((n, n)) + n * np.eye(n)) / (2 * n)
    return InstrumentResponse(R, np.ones(n), channel_edges(n, lo, hi))


def uniform_response(n, lo=1.0, hi=2.0):
    """Rank-one response spreading every photon evenly over all channels."""
    return InstrumentResponse(np.full((n, n), 1.0 / n), np.ones(n),
                              channel_edges(n, lo, hi))


RESPONSE_CASES = {
    "identity": identity_response,
    "tridiagonal": tridiagonal_response,
    "dispersed": dispersed_response,
    "all-ones": uniform_response,
}


@dataclass(frozen=True)
class ParameterVector:
    """Parameter values with names, box bounds and optimizer transforms.

    ``log_domain[k]`` selects whether the optimizer works with
    ``log(theta_k)`` (positive parameters) or with ``theta_k`` directly.
    Bounds are inclusive so that a fit pinned at a bound stays evaluable.
    """

    values: np.ndarray
    names: tuple
    bounds: tuple
    log_domain: tuple

    def __post_init__(self):
        values = np.array(self.values, dtype=float).reshape(-1)
        d = values.size
        if d < 1:
            raise DomainError("a model needs at least one parameter")
        if not (len(self.names) == len(self.bounds) == len(self.log_domain) == d):
            raise DomainError("names, bounds and transforms must match values")
        for (lo, hi), use_log in zip(self.bounds, self.log_domain):
            if not lo < hi or (use_log and lo <= 0):
                raise DomainError(f"invalid bounds ({lo}, {hi})")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "bounds", tuple(tuple(map(float, b)) for b in self.bounds))
        object.__setattr__(self, "log_domain", tuple(bool(x) for x in self.log_domain))

    def __len__(self):
        return self.values.size

    @property
    def lower(self):
        return np.array([b[0] for b in self.bounds])

    @property
    def upper(self):
        return np.array([b[1] for b in self.bounds])

    def with_values(self, values):
        return ParameterVector(values, self.names, self.bounds, self.log_domain)

    def with_transforms(self, log_domain):
        return ParameterVector(self.values, self.names, self.bounds, log_domain)

    def as_dict(self):
        return dict(zip(self.names, self.values.tolist()))

    def check(self):
        outside = (self.values < self.lower) | (self.values > self.upper)
        if outside.any() or not np.all(np.isfinite(self.values)):
            bad = [n for n, o in zip(self.names, outside) if o]
            raise DomainError(f"parameters outside bounds: {bad or self.names}")
        return self

    def __eq__(self, other):
        if not isinstance(other, ParameterVector):
            return NotImplemented
        return (np.array_equal(self.values, other.values) and self.names == other.names
                and self.bounds == other.bounds and self.log_domain == other.log_domain)


class SpectralModel(ABC):
    """Base class for parametric expected-count models.

    Subclasses implement ``_rates`` and ``_jacobian`` on raw parameter
    arrays and declare ``names``, ``bounds`` and ``log_domain``.
    """

    names: tuple = ()
    bounds: tuple = ()
    log_domain: tuple = ()

    def __init__(self, edges):
        self.edges = np.asarray(edges, dtype=float)
        if self.edges.ndim != 1 or self.edges.size < 2 or np.any(np.diff(self.edges) <= 0):
            raise DomainError("channel edges must be increasing with at least 2 entries")

    @property
    def n(self):
        return self.edges.size - 1

    @property
    def d(self):
        return len(self.names)

    @property
    def energies(self):
        """Per-channel evaluation energy: the channel's upper edge."""
        return self.edges[1:]

    def parameters(self, values=None, **named):
        """Build a :class:`ParameterVector` for this model."""
        if values is None:
            missing = [n for n in self.names if n not in named]
            if missing:
                raise DomainError(f"missing parameter values: {missing}")
            extra = set(named) - set(self.names)
            if extra:
                raise DomainError(f"unknown parameters: {sorted(extra)}")
            values = [named[n] for n in self.names]
        return ParameterVector(values, self.names, self.bounds, self.log_domain)

    def _theta(self, theta):
        if isinstance(theta, ParameterVector):
            theta.check()
            return theta.values
        arr = np.asarray(theta, dtype=float).reshape(-1)
        if arr.size != self.d:
            raise DomainError(f"expected {self.d} parameters, got {arr.size}")
        self.parameters(arr).check()
        return arr

    @abstractmethod
    def _rates(self, theta):
        """Unclamped expected counts."""

    @abstractmethod
    def _jacobian(self, theta):
        """``n x d`` matrix of ``d s_i / d theta_k``."""

    def evaluate(self, theta):
        """Return clamped rates, their Jacobian and the clamped-bin mask.

        No bounds check and no warning; this is the optimizer's hot path.
        Clamped bins get a zero Jacobian row, the derivative of
        ``max(s, EPS_FLOOR)``.
        """
        s = self._rates(theta)
        X = self._jacobian(theta)
        low = s < EPS_FLOOR
        if low.any():
            s = np.where(low, EPS_FLOOR, s)
            X = np.where(low[:, None], 0.0, X)
        return s, X, low

    def expected_counts(self, theta, on_floor="clamp"):
        theta = self._theta(theta)
        s = self._rates(theta)
        low = s < EPS_FLOOR
        if low.any():
            if on_floor == "raise":
                i = int(np.flatnonzero(low)[0])
                raise ModelViolationError(
                    f"expected count in bin {i} is {s[i]:.3g}, below floor {EPS_FLOOR}")
            warnings.warn(f"{int(low.sum())} expected counts clamped to {EPS_FLOOR}",
                          FloorClampWarning, stacklevel=2)
            s = np.where(low, EPS_FLOOR, s)
        return s

    def gradient(self, theta):
        theta = self._theta(theta)
        return self.evaluate(theta)[1]

    @abstractmethod
    def initial_guess(self, counts):
        """Cheap starting point for the optimizer."""

    def loglinear_design(self):
        """Design matrix ``Z`` with ``log s = Z u`` in optimizer coordinates.

        ``None`` for models that are not log-linear.
        """
        return None

    def clip(self, theta):
        p = self.parameters(np.asarray(theta, dtype=float))
        return np.clip(p.values, p.lower, p.upper)


class Constant(SpectralModel):
    """Same expected count ``theta`` in every channel."""

    names = ("theta",)
    bounds = ((EPS_FLOOR, 1e12),)
    log_domain = (True,)

    def __init__(self, n=None, edges=None):
        if edges is None:
            if n is None:
                raise DomainError("give either n or edges")
            edges = channel_edges(n)
        super().__init__(edges)

    def _rates(self, theta):
        return np.full(self.n, theta[0])

    def _jacobian(self, theta):
        return np.ones((self.n, 1))

    def initial_guess(self, counts):
        return self.clip([max(np.mean(counts), 1e-3)])

    def loglinear_design(self):
        return np.ones((self.n, 1))


class PowerLaw(SpectralModel):
    """``s_i = K E_i^-Gamma`` evaluated at each channel's upper edge."""

    names = ("K", "Gamma")
    bounds = ((1e-10, 1e12), (-30.0, 30.0))
    log_domain = (True, False)

    def __init__(self, edges):
        super().__init__(edges)
        self._logE = np.log(self.energies)

    @classmethod
    def on_grid(cls, n, lo=1.0, hi=2.0):
        return cls(channel_edges(n, lo, hi))

    def _rates(self, theta):
        return theta[0] * np.exp(-theta[1] * self._logE)

    def _jacobian(self, theta):
        e = np.exp(-theta[1] * self._logE)
        return np.column_stack([e, -theta[0] * e * self._logE])

    def initial_guess(self, counts):
        # log-log least squares on counts + 0.5
        y = np.log(np.asarray(counts, dtype=float) + 0.5)
        if self.n == 1:
            return self.clip([math.exp(y[0]), 0.0])
        A = np.column_stack([np.ones(self.n), -self._logE])
        (logK, gamma), *_ = np.linalg.lstsq(A, y, rcond=None)
        K = max(float(np.mean(counts)), 0.05) / np.mean(np.exp(-gamma * self._logE))
        return self.clip([K, gamma])

    def loglinear_design(self):
        return np.column_stack([np.ones(self.n), -self._logE])


class PowerLawWithLine(SpectralModel):
    """Power law with a flat line of strength ``Psi`` on channels ``m1 < i <= m2``.

    ``m1`` and ``m2`` are 1-based channel indices fixed at construction.
    With ``m1 == m2`` the line is empty and the model reduces to a power
    law in ``K`` and ``Gamma`` (``Psi`` is then unidentified).
    """

    names = ("K", "Gamma", "Psi")
    bounds = ((1e-10, 1e12), (-30.0, 30.0), (1e-10, 1e12))
    log_domain = (True, False, True)

    def __init__(self, edges, m1, m2):
        super().__init__(edges)
        m1, m2 = int(m1), int(m2)
        if not 0 <= m1 <= m2 <= self.n:
            raise DomainError(f"need 0 <= m1 <= m2 <= n, got m1={m1}, m2={m2}")
        self.m1, self.m2 = m1, m2
        self._logE = np.log(self.energies)
        self._line = np.zeros(self.n, dtype=bool)
        self._line[m1:m2] = True

    @classmethod
    def on_grid(cls, n, m1, m2, lo=1.0, hi=2.0):
        return cls(channel_edges(n, lo, hi), m1, m2)

    @property
    def line_mask(self):
        return self._line.copy()

    def _rates(self, theta):
        K, gamma, psi = theta
        return np.where(self._line, psi, K * np.exp(-gamma * self._logE))

    def _jacobian(self, theta):
        K, gamma, _ = theta
        e = np.where(self._line, 0.0, np.exp(-gamma * self._logE))
        return np.column_stack([e, -K * e * self._logE, self._line.astype(float)])

    def initial_guess(self, counts):
        counts = np.asarray(counts, dtype=float)
        cont = ~self._line
        if cont.sum() >= 2:
            y = np.log(counts[cont] + 0.5)
            A = np.column_stack([np.ones(cont.sum()), -self._logE[cont]])
            (_, gamma), *_ = np.linalg.lstsq(A, y, rcond=None)
            K = max(counts[cont].mean(), 0.05) / np.mean(np.exp(-gamma * self._logE[cont]))
        else:
            K, gamma = max(counts.mean(), 0.05), 0.0
        psi = max(counts[self._line].mean(), 0.05) if self._line.any() else 1.0
        return self.clip([K, gamma, psi])

    def loglinear_design(self):
        cont = (~self._line).astype(float)
        return np.column_stack([cont, -self._logE * cont, self._line.astype(float)])


class LogLinear(SpectralModel):
    """``log s_i = x_i^T theta`` for a fixed ``n x d`` design matrix."""

    log_domain = ()

    def __init__(self, design, edges=None, names=None, bound=50.0):
        design = np.asarray(design, dtype=float)
        if design.ndim != 2:
            raise DomainError("design must be a 2-D matrix")
        n, d = design.shape
        if np.linalg.matrix_rank(design) < d:
            raise DomainError("design matrix must have full column rank")
        super().__init__(channel_edges(n) if edges is None else edges)
        if self.n != n:
            raise DomainError("design rows must match the channel count")
        self.design = design
        self.names = tuple(names) if names else tuple(f"b{k}" for k in range(d))
        self.bounds = tuple((-bound, bound) for _ in range(d))
        self.log_domain = (False,) * d

    def _rates(self, theta):
        return np.exp(self.design @ theta)

    def _jacobian(self, theta):
        return self.design * np.exp(self.design @ theta)[:, None]

    def initial_guess(self, counts):
        y = np.log(np.asarray(counts, dtype=float) + 0.5)
        beta, *_ = np.linalg.lstsq(self.design, y, rcond=None)
        return self.clip(beta)

    def loglinear_design(self):
        return self.design


class PowerLawContinuum:
    """Continuum ``g(E) = K E^-Gamma`` for use inside a folded model."""

    names = ("K", "Gamma")
    bounds = ((1e-10, 1e12), (-30.0, 30.0))
    log_domain = (True, False)

    def value(self, energies, theta):
        return theta[0] * np.exp(-theta[1] * np.log(energies))

    def jacobian(self, energies, theta):
        logE = np.log(energies)
        e = np.exp(-theta[1] * logE)
        return np.column_stack([e, -theta[0] * e * logE])


class FoldedModel(SpectralModel):
    """Continuum pushed through an instrument response plus background.

    ``s_i = T * (sum_j R[j, i] A_j g(E~_j, theta) dE_j + B_i)`` where
    ``E~_j`` and ``dE_j`` are the model-bin midpoints and widths.

    With ``fold=False`` the redistribution step is skipped and model bin
    ``j`` feeds channel ``j`` directly, which needs ``J == n``.
    """

    def __init__(self, response, continuum=None, background=None, exposure=1.0,
                 edges=None, fold=True):
        self.response = response
        self.fold = bool(fold)
        n = response.n_channels
        if not self.fold and response.rmf.shape[0] != n:
            raise DomainError("an unfolded model needs one model bin per channel")
        super().__init__(channel_edges(n) if edges is None else edges)
        if self.n != n:
            raise DomainError("channel edges must match the response's channel count")
        self.continuum = continuum or PowerLawContinuum()
        self.names = self.continuum.names
        self.bounds = self.continuum.bounds
        self.log_domain = self.continuum.log_domain
        bkg = np.zeros(n) if background is None else np.broadcast_to(
            np.asarray(background, dtype=float), (n,)).copy()
        if np.any(bkg < 0):
            raise DomainError("background must be non-negative")
        if not exposure > 0:
            raise DomainError("exposure must be positive")
        self.background = bkg
        self.exposure = float(exposure)
        self._E = response.midpoints
        self._weight = response.area * response.widths
        self._Rt = np.ascontiguousarray(response.rmf.T)

    def _rates(self, theta):
        g = self._weight * self.continuum.value(self._E, theta)
        if self.fold:
            g = self._Rt @ g
        return self.exposure * (g + self.background)

    def _jacobian(self, theta):
        G = self._weight[:, None] * self.continuum.jacobian(self._E, theta)
        if self.fold:
            G = self._Rt @ G
        return self.exposure * G

    def unfolded(self):
        """The same model with the redistribution step removed."""
        return FoldedModel(self.response, self.continuum, self.background, self.exposure,
                           self.edges, fold=False)

    def initial_guess(self, counts):
        counts = np.asarray(counts, dtype=float)
        net = np.maximum(counts - self.exposure * self.background, 0.0)
        ch_energy = 0.5 * (self.edges[:-1] + self.edges[1:])
        if self.n >= 2 and np.all(ch_energy > 0):
            A = np.column_stack([np.ones(self.n), -np.log(ch_energy)])
            (_, gamma), *_ = np.linalg.lstsq(A, np.log(net + 0.5), rcond=None)
        else:
            gamma = 1.0
        gamma = float(np.clip(gamma, -10, 10))
        unit = self._rates(np.array([1.0, gamma])) - self.exposure * self.background
        total = max(net.sum(), 0.5)
        K = total / max(unit.sum(), 1e-300)
        return self.clip([K, gamma])


def expected_counts(model, theta, on_floor="clamp"):
    """Expected counts ``s(theta)``; see :meth:`SpectralModel.expected_counts`."""
    return model.expected_counts(theta, on_floor=on_floor)


def gradient_expected_counts(model, theta):
    """Jacobian ``X`` of the expected counts, shape ``(n, d)``."""
    return model.gradient(theta)


def simulate_counts(model, theta, seed, exposure=1.0, background=None):
    """Draw a dataset with independent Poisson counts at ``s(theta)``.

    ``seed`` may be an integer or a ``numpy.random.Generator``.
    """
    s = model.expected_counts(theta)
    gen = _rng.as_generator(seed, _rng.SIMULATE)
    counts = _rng.poisson(gen, s)
    return BinnedDataset(counts, model.edges, exposure, background)


class Rebinned(NamedTuple):
    dataset: BinnedDataset
    last_bin_short: bool


def rebin(dataset, min_count):
    """Merge adjacent channels left to right until each holds ``min_count``.

    A trailing group that never reaches ``min_count`` is kept as is and
    reported through ``last_bin_short``.
    """
    if int(min_count) != min_count or min_count < 1:
        raise DomainError("min_count must be a positive integer")
    if dataset.n == 0:
        raise DomainError("cannot rebin an empty dataset")
    starts = [0]
    acc = 0
    for i, c in enumerate(dataset.counts):
        acc += int(c)
        if acc >= min_count and i + 1 < dataset.n:
            starts.append(i + 1)
            acc = 0
    starts = np.asarray(starts)
    counts = np.add.reduceat(dataset.counts, starts)
    edges = np.append(dataset.edges[starts], dataset.edges[-1])
    bkg = None
    if dataset.background is not None:
        bkg = np.add.reduceat(dataset.background, starts)
    out = BinnedDataset(counts, edges, dataset.exposure, bkg)
    return Rebinned(out, bool(counts[-1] < min_count))
