"""Poisson cumulants of the per-bin C term and their lookup table.

For a bin with expected count ``s`` and ``N ~ Poisson(s)``, the moments
of ``C_i = c(N, s)`` and their mixed moments with ``N - s`` drive every
moment-based goodness-of-fit test.  They are computed by summing the
Poisson mass function until the remaining terms are negligible, and
cached in a uniform grid table that is interpolated with four-point
Lagrange polynomials.
"""

import hashlib
import io
import math
import os
import struct
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import special

from .cstat import _half_terms
from .errors import DomainError, TableError

TAU = 1e-30
S_OVERFLOW = 1e6
FIELDS = ("s", "k1", "k2", "k3", "k11", "k12", "k21", "k03")
TABLE_ENV = "CSTATGOF_TABLE"

MAGIC = b"CSTATCUM"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIIdddQdddq")
_DIGEST = 32
# Interpolated values must agree with direct summation to this relative
# accuracy at every midpoint above ``direct_below``.
VALIDATE_TOL = 1e-6


class CumulantSet(NamedTuple):
    """Cumulants of ``C_i`` at rate ``s``.

    ``k1, k2, k3`` are the mean and second and third central moments of
    ``C_i``; ``k11 = E[(C-k1)(N-s)]``, ``k12 = E[(C-k1)(N-s)^2]``,
    ``k21 = E[(C-k1)^2 (N-s)]`` and ``k03 = E[(N-s)^3]``.
    """

    s: float
    k1: float
    k2: float
    k3: float
    k11: float
    k12: float
    k21: float
    k03: float


class CumulantArrays(NamedTuple):
    """Vectorized counterpart of :class:`CumulantSet`."""

    s: np.ndarray
    k1: np.ndarray
    k2: np.ndarray
    k3: np.ndarray
    k11: np.ndarray
    k12: np.ndarray
    k21: np.ndarray
    k03: np.ndarray


def _truncation_index(t, cs, start, tau):
    """First ``K >= start`` with ``t[K+1] <= tau * cs[K]``, or ``None``."""
    K = np.arange(start, t.size - 1)
    hit = t[K + 1] <= tau * cs[K]
    if not hit.any():
        return None
    return int(K[np.argmax(hit)])


def cumulants_at(s, tau=TAU):
    """Cumulants of the per-bin C term by truncated Poisson summation.

    Summation runs from ``k = 0`` and always passes ``ceil(s)``; it stops
    at the first ``K`` whose next term ``p(K+1) c(K+1)`` is at most ``tau``
    times the partial sum.  Central moments are accumulated in a second
    pass with exactly rounded sums.
    """
    s = float(s)
    if not (s > 0 and math.isfinite(s)):
        raise DomainError(f"rate must be positive, got {s}")
    if s > S_OVERFLOW:
        raise DomainError(
            f"rate {s:g} exceeds {S_OVERFLOW:g}; in this regime C_i is "
            "chi-square with one degree of freedom to high accuracy")
    start = math.ceil(s)
    kmax = int(start + 60 + 30 * math.sqrt(s))
    while True:
        k = np.arange(kmax + 2, dtype=float)
        p = np.exp(special.xlogy(k, s) - s - special.gammaln(k + 1))
        c = 2.0 * _half_terms(k, s)
        t = p * c
        K = _truncation_index(t, np.cumsum(t), start, tau)
        if K is not None:
            break
        kmax *= 2
    k, p, c = k[:K + 1], p[:K + 1], c[:K + 1]
    k1 = math.fsum(p * c)
    dc = c - k1
    dn = k - s
    pdc = p * dc
    return CumulantSet(
        s=s,
        k1=k1,
        k2=math.fsum(pdc * dc),
        k3=math.fsum(pdc * dc * dc),
        k11=math.fsum(pdc * dn),
        k12=math.fsum(pdc * dn * dn),
        k21=math.fsum(pdc * dc * dn),
        k03=math.fsum(p * dn * dn * dn),
    )


def _rows_for(grid):
    return np.array([cumulants_at(x) for x in grid], dtype=float).reshape(-1, len(FIELDS))


def _direct_rows(s, tau=TAU):
    uniq, inv = np.unique(s, return_inverse=True)
    rows = np.array([cumulants_at(x, tau) for x in uniq], dtype=float)
    return rows.reshape(-1, len(FIELDS))[inv.reshape(-1)]


class DirectCumulants:
    """Cumulant source that sums the Poisson series for every rate."""

    checksum = "direct"

    def lookup(self, s):
        return cumulants_at(s)

    def columns(self, s):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        return CumulantArrays(*_direct_rows(s).T)


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid ``s_min, s_min + step, ..., s_max``."""

    s_min: float = 1e-3
    s_max: float = 100.0
    step: float = 1e-3

    def __post_init__(self):
        if not (0 < self.s_min <= self.s_max and self.step > 0):
            raise DomainError("need 0 < s_min <= s_max and step > 0")

    @property
    def count(self):
        return int(round((self.s_max - self.s_min) / self.step)) + 1

    def nodes(self):
        return self.s_min + self.step * np.arange(self.count)


class CumulantTable:
    """Immutable cumulant grid with four-point Lagrange interpolation.

    Rates below ``direct_below`` or outside the grid are summed directly.
    """

    def __init__(self, rows, spec, tau=TAU, direct_below=None, max_error=float("nan"),
                 timestamp=0):
        rows = np.ascontiguousarray(rows, dtype="<f8")
        if rows.ndim != 2 or rows.shape[1] != len(FIELDS) or rows.shape[0] != spec.count:
            raise TableError(f"table must have {spec.count} rows of {len(FIELDS)} columns")
        rows.setflags(write=False)
        self.rows = rows
        self.spec = spec
        self.tau = float(tau)
        self.direct_below = float(spec.s_min if direct_below is None else direct_below)
        self.max_error = float(max_error)
        self.timestamp = int(timestamp)
        self._grid = rows[:, 0]

    def __len__(self):
        return self.rows.shape[0]

    @property
    def grid(self):
        return self._grid

    def to_bytes(self):
        header = _HEADER.pack(MAGIC, FORMAT_VERSION, len(FIELDS), self.spec.s_min,
                              self.spec.s_max, self.spec.step, len(self), self.tau,
                              self.direct_below, self.max_error, self.timestamp)
        body = header + self.rows.tobytes()
        return body + hashlib.sha256(body).digest()

    @property
    def checksum(self):
        return hashlib.sha256(self.to_bytes()).hexdigest()

    @classmethod
    def from_bytes(cls, data):
        if len(data) < _HEADER.size + _DIGEST:
            raise TableError("table file is truncated")
        body, digest = data[:-_DIGEST], data[-_DIGEST:]
        if hashlib.sha256(body).digest() != digest:
            raise TableError("table checksum mismatch; the file is corrupt")
        (magic, version, ncol, s_min, s_max, step, nrow, tau, direct_below, max_error,
         timestamp) = _HEADER.unpack_from(body)
        if magic != MAGIC:
            raise TableError("not a cumulant table file")
        if version != FORMAT_VERSION:
            raise TableError(f"unsupported table format version {version}")
        if ncol != len(FIELDS):
            raise TableError(f"expected {len(FIELDS)} columns, found {ncol}")
        payload = body[_HEADER.size:]
        if len(payload) != nrow * ncol * 8:
            raise TableError("row count does not match the payload size")
        rows = np.frombuffer(payload, dtype="<f8").reshape(nrow, ncol).copy()
        return cls(rows, GridSpec(s_min, s_max, step), tau, direct_below, max_error,
                   timestamp)

    def save(self, path):
        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path):
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise TableError(f"cannot read table {path}: {exc}") from exc
        return cls.from_bytes(data)

    def to_csv(self, path):
        buf = io.StringIO()
        buf.write(",".join(FIELDS) + "\n")
        for row in self.rows:
            buf.write(",".join(repr(float(v)) for v in row) + "\n")
        atomic_write_bytes(path, buf.getvalue().encode())

    def _direct_mask(self, s):
        lo, hi = self._grid[0], self._grid[-1]
        mask = (s < max(lo, self.direct_below)) | (s > hi)
        if len(self) < 4:
            # too few nodes to interpolate: only exact nodes are served
            mask |= ~np.isin(s, self._grid)
        return mask

    def columns(self, s):
        """Cumulants at every rate in ``s`` as arrays."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        if np.any(~(s > 0)) or np.any(~np.isfinite(s)):
            raise DomainError("rates must be positive and finite")
        out = np.empty((s.size, len(FIELDS)))
        direct = self._direct_mask(s)
        if direct.any():
            out[direct] = _direct_rows(s[direct], self.tau)
        idx = np.flatnonzero(~direct)
        if idx.size:
            out[idx] = self._interpolate(s[idx])
        return CumulantArrays(*out.T)

    def _interpolate(self, s):
        g = self._grid
        m = g.size
        j = np.clip(np.searchsorted(g, s, side="right") - 1, 0, m - 1)
        t = (s - g[j]) / self.spec.step
        if m < 4:
            return self.rows[j]
        j0 = np.clip(j - 1, 0, m - 4)
        x = (j - j0) + t
        w = np.stack([
            -(x - 1) * (x - 2) * (x - 3) / 6,
            x * (x - 2) * (x - 3) / 2,
            -x * (x - 1) * (x - 3) / 2,
            x * (x - 1) * (x - 2) / 6,
        ], axis=1)
        nodes = self.rows[j0[:, None] + np.arange(4)[None, :]]
        out = np.einsum("mq,mqf->mf", w, nodes)
        out[:, 0] = s
        return out

    def lookup(self, s):
        """Cumulants at a single rate."""
        return CumulantSet(*(float(c[0]) for c in self.columns([s])))


def _validate(table, workers=1):
    """Interpolation error at every grid midpoint, relative to direct sums.

    Returns the smallest node above which every midpoint meets
    :data:`VALIDATE_TOL` and the worst error found above it.
    """
    g = table.grid
    if g.size < 4:
        return table.spec.s_min, 0.0
    mids = 0.5 * (g[:-1] + g[1:])
    exact = _compute(mids, workers)
    probe = CumulantTable(table.rows, table.spec, table.tau, direct_below=0.0)
    approx = probe._interpolate(mids)
    cols = [FIELDS.index(f) for f in ("k1", "k2", "k3", "k11", "k12", "k21")]
    err = np.max(np.abs(approx[:, cols] - exact[:, cols])
                 / np.maximum(np.abs(exact[:, cols]), 1e-12), axis=1)
    bad = np.flatnonzero(err > VALIDATE_TOL)
    cut = 0 if bad.size == 0 else bad[-1] + 1
    if g[cut] > 1.0:
        raise TableError(f"interpolation error {err[cut - 1]:.3g} at s={mids[cut - 1]:.6g} "
                         f"exceeds {VALIDATE_TOL}")
    return float(g[cut]), float(err[cut:].max(initial=0.0))


def _compute(values, workers):
    values = np.asarray(values, dtype=float)
    if workers is None or workers <= 1 or values.size < 2000:
        return _rows_for(values)
    chunks = np.array_split(values, workers * 4)
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(_rows_for, chunks))
    return np.vstack(parts)


def build_table(spec=None, workers=1, validate=True):
    """Compute a cumulant table on ``spec`` (the default 1e-3 to 100 grid).

    The result does not depend on ``workers``.  With ``validate`` every
    grid midpoint is checked against direct summation and the threshold
    below which lookups bypass interpolation is set from the result.
    """
    spec = spec or GridSpec()
    rows = _compute(spec.nodes(), workers)
    table = CumulantTable(rows, spec, TAU, timestamp=_build_time())
    if validate:
        direct_below, max_err = _validate(table, workers)
        table = CumulantTable(rows, spec, TAU, direct_below, max_err, table.timestamp)
    return table


def _build_time():
    return int(os.environ.get("SOURCE_DATE_EPOCH", "0"))


def verify_table(path):
    """Load ``path`` and spot-check rows against fresh summation."""
    table = CumulantTable.load(path)
    g = table.grid
    if np.any(np.abs(np.diff(g) - table.spec.step) > 1e-9 * max(1.0, table.spec.s_max)):
        raise TableError("grid is not uniform")
    idx = np.unique(np.linspace(0, len(table) - 1, min(len(table), 25)).astype(int))
    for i in idx:
        fresh = np.array(cumulants_at(g[i], table.tau))
        if not np.array_equal(fresh, table.rows[i]):
            raise TableError(f"row {i} (s={g[i]}) differs from direct summation")
    return table


def atomic_write_bytes(path, data):
    """Write ``data`` to ``path`` through a temporary file and a rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def cache_path():
    base = os.environ.get("XDG_CACHE_HOME") or os.path.join(Path.home(), ".cache")
    return Path(base) / "cstatgof" / f"cumulants-v{FORMAT_VERSION}.bin"


_DEFAULT = {}


def default_table(build=True):
    """The shared default table.

    Reads the file named by ``CSTATGOF_TABLE`` when set.  Otherwise uses a
    per-user cache file, building it on first use when ``build`` is true.
    """
    env = os.environ.get(TABLE_ENV)
    path = Path(env) if env else cache_path()
    key = str(path)
    if key in _DEFAULT:
        return _DEFAULT[key]
    if path.exists():
        table = CumulantTable.load(path)
    elif env:
        raise TableError(f"{TABLE_ENV} names a missing table file: {path}")
    elif build:
        table = build_table()
        table.save(path)
    else:
        raise TableError("no cumulant table is available; build one with "
                         "`cstatgof table build` or allow direct summation")
    _DEFAULT[key] = table
    return table


def resolve(source=None, allow_direct=True):
    """Return a cumulant source with ``columns`` and ``lookup`` methods.

    ``source`` may be a table, a table path, ``"direct"`` or ``None`` for
    the default table.  With ``allow_direct`` false a missing table is an
    error instead of falling back to direct summation.
    """
    if source is None:
        try:
            return default_table(build=allow_direct)
        except TableError:
            if allow_direct:
                return DirectCumulants()
            raise
    if isinstance(source, str) and source == "direct":
        if not allow_direct:
            raise TableError("direct summation is disabled")
        return DirectCumulants()
    if isinstance(source, (str, os.PathLike)):
        return CumulantTable.load(source)
    return source
