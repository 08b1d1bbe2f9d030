"""Monte Carlo calibration of goodness-of-fit tests.

Each experiment cell fixes a model family, a channel count ``n`` and a
normalization ``K``.  Replicate ``m`` of a cell draws its data from the
stream ``(seed, CELL, family, n, K, m)`` and its bootstrap (if any) from
``(derive_seed(seed, CELL_BOOT, family, n, K, m), BOOTSTRAP, b)``.  Results
therefore depend only on the master seed and the cell, never on the
order or the process in which cells are run.
"""

import csv
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

from . import gof
from . import rng as _rng
from .cumulants import resolve
from .errors import CstatError, DomainError
from .fitting import fit_many, fit_mle
from .models import (RESPONSE_CASES, BinnedDataset, FoldedModel, PowerLaw,
                     PowerLawWithLine, Constant, channel_edges)

FAMILIES = ("powerlaw", "powerlaw+emission", "powerlaw+absorption", "constant")
MOMENT_ALGORITHMS = ("lr-chi2", "naive-z-highorder", "corrected-z-first", "corrected-z-high")
FLAG_FAIL_FRACTION = 0.01
REPORT_VERSION = 1


@dataclass(frozen=True)
class ExperimentGrid:
    """Factors of a simulation study.

    ``family`` selects the generating model.  Line families place a line on
    channels ``m1 < i <= m1 + b`` with ``m1 = b = n // 10`` and strength
    ``psi_rule`` (``"2K"`` for emission, ``"K/10"`` for absorption).  The
    fitted null model is always the plain power law (or the constant for
    ``family="constant"``).
    """

    family: str = "powerlaw"
    gamma: float = 3.0
    K_values: tuple = (0.1, 0.25, 0.5, 1.0, 1.6, 2.5, 5.0, 10.0)
    n_values: tuple = (10, 25, 50, 100, 200, 300, 400)
    psi_rule: Optional[str] = None
    alphas: tuple = (0.1,)
    M: int = 3000
    B: int = 300
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise DomainError(f"family must be one of {FAMILIES}")
        if self.M < 1 or self.B < 1:
            raise DomainError("M and B must be positive")
        if any(not k > 0 for k in self.K_values):
            raise DomainError("every K must be positive")
        rule = self.psi_rule or {"powerlaw+emission": "2K", "powerlaw+absorption": "K/10"}.get(
            self.family)
        if self.family.startswith("powerlaw+") != (rule is not None):
            raise DomainError(f"psi rule {rule!r} does not fit family {self.family!r}")
        if rule is not None and rule not in ("2K", "K/10"):
            raise DomainError("psi rule must be '2K' or 'K/10'")
        object.__setattr__(self, "psi_rule", rule)
        object.__setattr__(self, "K_values", tuple(float(k) for k in self.K_values))
        object.__setattr__(self, "n_values", tuple(int(n) for n in self.n_values))
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))

    def cells(self):
        return [Cell(self.family, n, K, self.gamma, self.psi_rule)
                for n in sorted(self.n_values) for K in sorted(self.K_values)]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise DomainError(f"unknown grid fields: {sorted(extra)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass(frozen=True)
class Cell:
    """One (family, n, K) combination with its generating and null models."""

    family: str
    n: int
    K: float
    gamma: float = 3.0
    psi_rule: Optional[str] = None

    @property
    def key(self):
        return (FAMILIES.index(self.family), self.n, int(round(self.K * 1e6)),
                int(round(self.gamma * 1e6)) & 0xFFFFFFFF)

    def null_model(self):
        if self.family == "constant":
            return Constant(self.n)
        return PowerLaw.on_grid(self.n)

    def null_theta(self):
        if self.family == "constant":
            return np.array([self.K])
        return np.array([self.K, self.gamma])

    def generating_model(self):
        if self.psi_rule is None:
            return self.null_model(), self.null_theta()
        m1 = max(self.n // 10, 0)
        b = max(self.n // 10, 1)
        psi = 2 * self.K if self.psi_rule == "2K" else self.K / 10
        return PowerLawWithLine.on_grid(self.n, m1, m1 + b), np.array([self.K, self.gamma, psi])


PRESETS = {
    "type1-desk": ExperimentGrid("powerlaw", K_values=(0.1, 0.25, 1.0), n_values=(100,),
                                alphas=(0.1,), M=2000, B=300),
    "power-desk": ExperimentGrid("powerlaw+emission", K_values=(0.1, 1.0), n_values=(100,),
                                alphas=(0.1,), M=1000, B=300),
    "absorption-desk": ExperimentGrid("powerlaw+absorption", K_values=(1.0, 10.0),
                                      n_values=(100,), alphas=(0.1,), M=1000, B=300),
    "desk": ExperimentGrid("powerlaw", K_values=(0.25, 1.0), n_values=(25, 100),
                           alphas=(0.05, 0.1), M=2000, B=300),
    "full": ExperimentGrid("powerlaw", alphas=(0.01, 0.05, 0.1), M=3000, B=300),
}


def simulate_cell(cell, M, seed, start=0):
    """Counts of replicates ``start .. start + M - 1`` as an ``(M, n)`` array."""
    model, theta = cell.generating_model()
    s = model.expected_counts(theta)
    gens = [_rng.stream(seed, _rng.CELL, *cell.key, m) for m in range(start, start + M)]
    return _rng.poisson_rows(gens, s)


def fit_cell(cell, counts):
    """Refit the null model to every row, starting from the true null value."""
    return fit_many(counts, cell.null_model(), cell.null_theta())


def null_histogram(cell, M, seed):
    """``C(theta_hat)`` for ``M`` replicates simulated and fitted under the null.

    Failed fits appear as NaN; the indices are returned alongside.
    """
    counts = simulate_cell(cell, M, seed)
    fit = fit_cell(cell, counts)
    values = np.where(fit.converged, fit.c_min, np.nan)
    return values, tuple(int(i) for i in np.flatnonzero(~fit.converged))


def _boot_seed(seed, cell, m):
    return _rng.derive_seed(seed, _rng.CELL_BOOT, *cell.key, m) & 0x7FFFFFFFFFFFFFFF


def _critical_value(algorithm, result, alpha):
    if result.ref_var is not None:
        return result.ref_mean + stats.norm.isf(alpha) * math.sqrt(result.ref_var)
    if result.dof is not None:
        return float(stats.chi2.isf(alpha, result.dof))
    reps = np.asarray(result.boot.replicates)
    reps = reps[~np.isnan(reps)]
    return float(np.quantile(reps, 1 - alpha))


def cell_pvalues(cell, algorithms, M, seed, B=300, cumulants=None):
    """p-values of every algorithm on every replicate of ``cell``.

    Returns ``(pvals, results, failures, c_values)``.  ``pvals[alg]`` holds
    one p-value per replicate (NaN when the fit or the test failed) and
    ``results[alg]`` the matching :class:`GofResult` objects (None on
    failure).  ``failures`` lists the replicates whose fit failed and
    ``c_values`` holds ``C(theta_hat)`` per replicate.
    """
    algorithms = tuple(algorithms)
    for a in algorithms:
        if a not in gof.ALGORITHMS:
            raise DomainError(f"unknown algorithm {a!r}")
    model = cell.null_model()
    counts = simulate_cell(cell, M, seed)
    fit = fit_cell(cell, counts)
    source = resolve(cumulants)
    pvals = {a: np.full(M, np.nan) for a in algorithms}
    results = {a: [None] * M for a in algorithms}
    for m in range(M):
        if not fit.converged[m]:
            continue
        theta, c = fit.theta[m], float(fit.c_min[m])
        if any(a in MOMENT_ALGORITHMS[1:] for a in algorithms):
            theta = gof.prepare(theta, model, source)
        for a in algorithms:
            try:
                res = _run(a, c, theta, model, source, B, _boot_seed(seed, cell, m))
            except CstatError:
                continue
            pvals[a][m] = res.p_value
            results[a][m] = res
    failed = tuple(int(m) for m in np.flatnonzero(~fit.converged))
    return pvals, results, failed, np.where(fit.converged, fit.c_min, np.nan)


def _run(algorithm, c, theta, model, source, B, seed):
    if algorithm == "lr-chi2":
        return gof.lr_chi2_test(c, model.n, model.d)
    if algorithm == "naive-z-highorder":
        return gof.naive_z_highorder(c, theta, model, source)
    if algorithm == "corrected-z-first":
        return gof.corrected_z_first(c, theta, model, source)
    if algorithm == "corrected-z-high":
        return gof.corrected_z_high(c, theta, model, source)
    if algorithm == "naive-z-boot":
        return gof.naive_z_boot(c, theta, model, B, seed)
    if algorithm == "bootstrap":
        return gof.parametric_bootstrap(c, theta, model, B, seed)
    if algorithm == "double-bootstrap":
        return gof.double_bootstrap(c, theta, model, B, B, seed)
    raise DomainError(f"unknown algorithm {algorithm!r}")


def rejection_rate(pvals, alpha):
    """Rejection fraction ``r`` among finite p-values and ``sqrt(r(1-r)/M)``."""
    p = np.asarray(pvals, dtype=float)
    p = p[~np.isnan(p)]
    if p.size == 0:
        return float("nan"), float("nan"), 0
    r = float(np.count_nonzero(p <= alpha)) / p.size
    return r, math.sqrt(r * (1 - r) / p.size), int(p.size)


@dataclass
class CalibrationReport:
    """Tidy records of a calibration run plus the ``C`` samples behind them.

    ``null_samples`` maps each cell to ``C(theta_hat)`` per replicate; for
    power cells the data come from the line alternative.
    """

    grid: dict
    algorithms: tuple
    records: list = field(default_factory=list)
    null_samples: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)

    def rate(self, algorithm, n, K, alpha, metric=None):
        for r in self.records:
            if (r["algorithm"] == algorithm and r["n"] == n and r["K"] == K
                    and r["alpha"] == alpha and r["metric"] in
                    ((metric,) if metric else ("type1_rate", "power"))):
                return r["value"]
        raise KeyError((algorithm, n, K, alpha))

    def to_dict(self):
        return {"version": REPORT_VERSION, "grid": self.grid,
                "algorithms": list(self.algorithms), "records": self.records,
                "null_samples": {k: [None if math.isnan(v) else v for v in vals]
                                 for k, vals in self.null_samples.items()},
                "flags": self.flags}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n"

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["algorithm", "n", "K", "alpha", "metric", "value", "se"])
        for r in self.records:
            w.writerow([r["algorithm"], r["n"], repr(r["K"]), repr(r["alpha"]), r["metric"],
                        _fmt(r["value"]), _fmt(r["se"])])
        return buf.getvalue()


def _fmt(v):
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def _nan_to_none(v):
    return None if isinstance(v, float) and math.isnan(v) else v


def _cell_records(cell, algorithms, alphas, M, seed, B, cumulants, metric):
    pvals, results, failed_fits, c_values = cell_pvalues(cell, algorithms, M, seed, B,
                                                         cumulants)
    failures = len(failed_fits)
    records, flags = [], []
    for a in algorithms:
        test_failed = [m for m in np.flatnonzero(np.isnan(pvals[a])).tolist()
                       if m not in set(failed_fits)]
        test_failures = len(test_failed)
        for alpha in alphas:
            r, se, used = rejection_rate(pvals[a], alpha)
            records.append({"algorithm": a, "n": cell.n, "K": cell.K, "alpha": alpha,
                            "metric": metric, "value": _nan_to_none(r),
                            "se": _nan_to_none(se), "replicates": used})
            crit = [_critical_value(a, res, alpha) for res in results[a] if res is not None]
            mean_q = float(np.mean(crit)) if crit else float("nan")
            se_q = float(np.std(crit, ddof=1) / math.sqrt(len(crit))) if len(crit) > 1 else float("nan")
            records.append({"algorithm": a, "n": cell.n, "K": cell.K, "alpha": alpha,
                            "metric": "critical_value", "value": _nan_to_none(mean_q),
                            "se": _nan_to_none(se_q), "replicates": len(crit)})
        if test_failures + failures > FLAG_FAIL_FRACTION * M:
            flags.append({"algorithm": a, "n": cell.n, "K": cell.K,
                          "fit_failures": failures, "test_failures": test_failures,
                          "failed_replicates": sorted(set(failed_fits) | set(test_failed)),
                          "seed": seed})
    return records, flags, {_sample_key(cell): [float(v) for v in c_values]}


def _sample_key(cell):
    return f"{cell.family}/n={cell.n}/K={cell.K!r}"


def _run_cells(grid, algorithms, cumulants, workers, metric):
    cells = grid.cells()
    args = [(c, tuple(algorithms), grid.alphas, grid.M, grid.seed, grid.B, cumulants, metric)
            for c in cells]
    if workers and workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(_cell_records_star, args))
    else:
        outs = [_cell_records(*a) for a in args]
    report = CalibrationReport(grid.to_dict(), tuple(algorithms))
    for records, flags, samples in outs:
        report.records.extend(records)
        report.flags.extend(flags)
        report.null_samples.update(samples)
    report.records.sort(key=lambda r: (r["algorithm"], r["n"], r["K"], r["alpha"], r["metric"]))
    return report


def _cell_records_star(args):
    return _cell_records(*args)


def type1_curve(grid, algorithms, cumulants=None, workers=1):
    """Type-I error rates of ``algorithms`` over a null-family grid."""
    if grid.psi_rule is not None:
        raise DomainError("type-I curves need a family without a line")
    return _run_cells(grid, algorithms, cumulants, workers, "type1_rate")


def power_curve(grid, algorithms, cumulants=None, workers=1):
    """Power against a line alternative; the plain power law is the null.

    Every algorithm sees the same simulated datasets.
    """
    if grid.psi_rule is None:
        raise DomainError("power curves need an emission or absorption family")
    return _run_cells(grid, algorithms, cumulants, workers, "power")


def rmf_case_study(case, K_over_n=10.0, M=1000, seed=0, n=50, gamma=3.0, background=0.1,
                   reference="identity"):
    """Null ``C(theta_hat)`` samples under a response case and a reference case.

    Both cases use the same random streams, so the two samples are
    paired replicate by replicate.
    """
    if case not in RESPONSE_CASES or reference not in RESPONSE_CASES:
        raise DomainError(f"case must be one of {tuple(RESPONSE_CASES)}")
    K = K_over_n * n
    theta = np.array([K, gamma])
    out = {}
    for name in dict.fromkeys((case, reference)):
        model = FoldedModel(RESPONSE_CASES[name](n), background=background)
        s = model.expected_counts(theta)
        gens = [_rng.stream(seed, _rng.CELL, 100, n, int(round(K * 1e6)), m) for m in range(M)]
        counts = _rng.poisson_rows(gens, s)
        fit = fit_many(counts, model, theta)
        out[name] = np.where(fit.converged, fit.c_min, np.nan)
    a, b = out[case], out[reference]
    ks = stats.ks_2samp(a[~np.isnan(a)], b[~np.isnan(b)]).statistic
    return {"case": case, "reference": reference, "samples": out[case],
            "reference_samples": out[reference], "ks_distance": float(ks)}


def runtime_bench(n_values=(25, 50, 100, 200), B=100, seed=0, K=1.0, gamma=3.0, repeats=5,
                  cumulants=None):
    """CPU seconds per end-to-end corrected-Z test and per bootstrap test.

    Each timing covers one fit plus the test on a fresh dataset and is
    averaged over ``repeats`` datasets.
    """
    source = resolve(cumulants)
    rows = []
    for n in n_values:
        model = PowerLaw.on_grid(n)
        s = model.expected_counts([K, gamma])
        datasets = [BinnedDataset.on_grid(_rng.poisson(_rng.stream(seed, _rng.BENCH, n, r), s))
                    for r in range(repeats)]

        def corrected(ds):
            fit = fit_mle(ds, model, warn=False)
            return gof.corrected_z_high(fit.c_min, fit, model, source)

        def boot(ds):
            fit = fit_mle(ds, model, warn=False)
            return gof.parametric_bootstrap(fit.c_min, fit, model, B, seed)

        corrected(datasets[0])
        t_cz = _cpu_time(corrected, datasets)
        t_bs = _cpu_time(boot, datasets)
        rows.append({"n": n, "B": B, "corrected_z_seconds": t_cz, "bootstrap_seconds": t_bs,
                     "ratio": t_bs / t_cz if t_cz > 0 else float("inf")})
    return rows


def _cpu_time(fn, datasets):
    start = time.process_time()
    for ds in datasets:
        fn(ds)
    return (time.process_time() - start) / len(datasets)
