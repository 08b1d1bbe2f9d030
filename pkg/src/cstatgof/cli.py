"""Command-line interface.

Exit status is 0 on success, 1 when a computation fails and 2 when the
input is invalid.  Failures print a one-line JSON diagnostic to stderr
and never leave partial output files.
"""

import argparse
import json
import sys
import warnings

import numpy as np

from . import calibration, gof
from . import io as _io
from . import rng as _rng
from .cumulants import (TABLE_ENV, CumulantTable, GridSpec, build_table, resolve,
                        verify_table)
from .errors import (CstatError, DomainError, FitError, GofError, IllConditionedError,
                     ModelViolationError, TableError)
from .fitting import fit_mle
from .models import simulate_counts

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2


class UsageError(DomainError):
    """Incompatible or missing command-line options."""


def _methods(text):
    methods = [m.strip() for m in text.split(",") if m.strip()]
    bad = [m for m in methods if m not in gof.ALGORITHMS]
    if bad or not methods:
        raise UsageError(f"unknown method(s) {bad}; choose from {', '.join(gof.ALGORITHMS)}")
    return methods


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of integers, got {text!r}") from None


def build_parser():
    p = argparse.ArgumentParser(prog="cstatgof", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        if data:
            sp.add_argument("--data", required=True, help="dataset CSV")
            sp.add_argument("--rmf", help="dense redistribution matrix CSV")
            sp.add_argument("--arf", help="effective area CSV")
        sp.add_argument("--model", required=True, help="model config JSON")
        sp.add_argument("--out", help="output file (default: stdout)")
        sp.add_argument("--format", choices=("json", "csv"), default="json")

    fit = sub.add_parser("fit", help="fit a model by minimizing C")
    common(fit)

    g = sub.add_parser("gof", help="fit and run goodness-of-fit tests")
    common(g)
    g.add_argument("--method", default="corrected-z-high", type=_methods,
                   help="comma-separated list of " + ", ".join(gof.ALGORITHMS))
    g.add_argument("--B", type=int, default=gof.DEFAULT_B)
    g.add_argument("--B1", type=int, default=gof.DEFAULT_B_DOUBLE)
    g.add_argument("--B2", type=int, default=gof.DEFAULT_B_DOUBLE)
    g.add_argument("--alpha", type=float, default=0.05)
    g.add_argument("--seed", type=int)
    g.add_argument("--table", help=f"cumulant table file (default: ${TABLE_ENV} or cache)")

    s = sub.add_parser("simulate", help="draw a Poisson dataset from a model")
    s.add_argument("--model", required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", help="dataset CSV (default: stdout)")
    s.add_argument("--format", choices=("csv",), default="csv")

    t = sub.add_parser("table", help="build or verify a cumulant table")
    tsub = t.add_subparsers(dest="action", required=True)
    tb = tsub.add_parser("build")
    tb.add_argument("--out", required=True)
    tb.add_argument("--workers", type=int, default=1)
    tb.add_argument("--s-min", type=float, default=GridSpec.s_min)
    tb.add_argument("--s-max", type=float, default=GridSpec.s_max)
    tb.add_argument("--step", type=float, default=GridSpec.step)
    tb.add_argument("--csv", help="also export the rows as CSV")
    tv = tsub.add_parser("verify")
    tv.add_argument("path")

    c = sub.add_parser("calibrate", help="Monte Carlo type-I error or power study")
    c.add_argument("--config", help="experiment grid JSON")
    c.add_argument("--preset", choices=sorted(calibration.PRESETS))
    c.add_argument("--method", type=_methods, default=list(calibration.MOMENT_ALGORITHMS))
    c.add_argument("--seed", type=int, required=True)
    c.add_argument("--M", type=int, help="override replications per cell")
    c.add_argument("--B", type=int, help="override bootstrap size")
    c.add_argument("--workers", type=int, default=1)
    c.add_argument("--table")
    c.add_argument("--out")
    c.add_argument("--format", choices=("json", "csv"), default="json")

    b = sub.add_parser("bench", help="time corrected-Z against the bootstrap")
    b.add_argument("--n", type=_int_list, default=[25, 50, 100, 200])
    b.add_argument("--B", type=int, default=100)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--seed", type=int, required=True)
    b.add_argument("--table")
    b.add_argument("--out")
    b.add_argument("--format", choices=("json", "csv"), default="json")
    return p


def _emit(text, out):
    if out:
        _io.atomic_write_text(out, text)
    else:
        sys.stdout.write(text)


def _load_problem(args):
    config = _io.read_model_config(args.model)
    exposure = float(config.get("exposure", 1.0)) if isinstance(config, dict) else 1.0
    dataset = _io.read_dataset(args.data, exposure)
    response = None
    if bool(args.rmf) != bool(args.arf):
        raise UsageError("--rmf and --arf must be given together")
    if args.rmf:
        response = _io.read_response(args.rmf, args.arf)
        if response.n_channels != dataset.n:
            raise UsageError(f"response has {response.n_channels} channels, "
                             f"dataset has {dataset.n}")
    spec = _io.build_model(config, edges=dataset.edges, response=response,
                           background=dataset.background)
    if response is None and dataset.background is not None and np.any(dataset.background):
        raise UsageError("a background column needs --rmf/--arf (a folded model)")
    return config, dataset, spec


def _echo(args, config):
    keep = ("command", "data", "rmf", "arf", "method", "B", "B1", "B2", "alpha", "seed",
            "table", "format")
    echo = {k: getattr(args, k) for k in keep if hasattr(args, k)}
    echo["model"] = config
    return echo


def cmd_fit(args):
    config, dataset, spec = _load_problem(args)
    init = spec.theta
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit = fit_mle(dataset, spec.model, init)
    report = _io.AnalysisReport.build(_echo(args, config), fit)
    _emit(report.to_json() if args.format == "json" else _fit_csv(fit), args.out)


def _fit_csv(fit):
    lines = ["parameter,value"]
    lines += [f"{k},{v!r}" for k, v in fit.theta_hat.as_dict().items()]
    lines.append(f"c_min,{fit.c_min!r}")
    return "\n".join(lines) + "\n"


def cmd_gof(args):
    stochastic = [m for m in args.method if m in gof.BOOTSTRAP_ALGORITHMS]
    if stochastic and args.seed is None:
        raise UsageError(f"--seed is required for {', '.join(stochastic)}")
    if not 0 < args.alpha < 1:
        raise UsageError("--alpha must lie in (0, 1)")
    config, dataset, spec = _load_problem(args)
    needs_table = any(m not in gof.BOOTSTRAP_ALGORITHMS and m != "lr-chi2" for m in args.method)
    source = resolve(args.table) if needs_table else None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit = fit_mle(dataset, spec.model, spec.theta)
        results = [gof.run_test(m, fit, spec.model, cumulants=source, B=args.B, B1=args.B1,
                                B2=args.B2, seed=args.seed) for m in args.method]
    checksum = getattr(source, "checksum", "") if source is not None else ""
    report = _io.AnalysisReport.build(_echo(args, config), fit, results, checksum)
    _emit(report.to_json() if args.format == "json" else report.to_csv(), args.out)


def cmd_simulate(args):
    config = _io.read_model_config(args.model)
    spec = _io.build_model(config)
    if spec.theta is None:
        raise UsageError("simulate needs every parameter value in the model config")
    gen = _rng.stream(args.seed, _rng.SIMULATE)
    dataset = simulate_counts(spec.model, spec.theta, gen,
                              exposure=float(config.get("exposure", 1.0)))
    _emit(_io.format_dataset_csv(dataset), args.out)


def cmd_table(args):
    if args.action == "build":
        table = build_table(GridSpec(args.s_min, args.s_max, args.step), workers=args.workers)
        table.save(args.out)
        if args.csv:
            table.to_csv(args.csv)
        sys.stdout.write(json.dumps({"path": args.out, "rows": len(table),
                                     "direct_below": table.direct_below,
                                     "max_error": table.max_error,
                                     "checksum": table.checksum}, sort_keys=True) + "\n")
    else:
        table = verify_table(args.path)
        sys.stdout.write(json.dumps({"path": args.path, "rows": len(table), "ok": True,
                                     "checksum": table.checksum}, sort_keys=True) + "\n")


def cmd_calibrate(args):
    if bool(args.config) == bool(args.preset):
        raise UsageError("give exactly one of --config and --preset")
    if args.config:
        grid = calibration.ExperimentGrid.from_dict(_io.read_model_config(args.config))
    else:
        grid = calibration.PRESETS[args.preset]
    overrides = {"seed": args.seed}
    if args.M:
        overrides["M"] = args.M
    if args.B:
        overrides["B"] = args.B
    grid = calibration.ExperimentGrid.from_dict({**grid.to_dict(), **overrides})
    runner = calibration.power_curve if grid.psi_rule else calibration.type1_curve
    report = runner(grid, args.method, cumulants=args.table, workers=args.workers)
    _emit(report.to_json() if args.format == "json" else report.to_csv(), args.out)


def cmd_bench(args):
    rows = calibration.runtime_bench(args.n, args.B, args.seed, repeats=args.repeats,
                                     cumulants=args.table)
    if args.format == "json":
        text = json.dumps(rows, indent=2, sort_keys=True) + "\n"
    else:
        keys = ["n", "B", "corrected_z_seconds", "bootstrap_seconds", "ratio"]
        text = ",".join(keys) + "\n" + "".join(
            ",".join(repr(r[k]) for k in keys) + "\n" for r in rows)
    _emit(text, args.out)


COMMANDS = {"fit": cmd_fit, "gof": cmd_gof, "simulate": cmd_simulate, "table": cmd_table,
            "calibrate": cmd_calibrate, "bench": cmd_bench}


def _diagnostic(code, exc):
    sys.stderr.write(json.dumps({"error": code, "type": type(exc).__name__,
                                 "message": str(exc)}, sort_keys=True) + "\n")


def run(argv=None):
    """Run the CLI and return the exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    try:
        COMMANDS[args.command](args)
    except _io.InputError as exc:
        _diagnostic("unreadable-input", exc)
        return EXIT_INVALID
    except _io.SchemaError as exc:
        _diagnostic("schema-violation", exc)
        return EXIT_INVALID
    except UsageError as exc:
        _diagnostic("incompatible-options", exc)
        return EXIT_INVALID
    except TableError as exc:
        _diagnostic("table-invalid", exc)
        return EXIT_INVALID
    except (FitError, IllConditionedError, GofError, ModelViolationError) as exc:
        _diagnostic("computation-failed", exc)
        return EXIT_RUNTIME
    except DomainError as exc:
        _diagnostic("invalid-input", exc)
        return EXIT_INVALID
    except (CstatError, OSError) as exc:
        _diagnostic("runtime-failure", exc)
        return EXIT_RUNTIME
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
