"""File formats: datasets, responses, model configs and analysis reports.

Datasets are CSV with header ``channel,lo,hi,count[,background]``.  A
response is a pair of CSV files: a dense ``J x n`` redistribution matrix
without header, and an area table with header ``j,x_mid,width,area``.
Model configs and reports are JSON; unknown keys are rejected.
"""

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as _rng
from .cumulants import atomic_write_bytes
from .errors import DomainError
from .fitting import FitResult
from .gof import GofResult
from .models import (BinnedDataset, Constant, FoldedModel, InstrumentResponse, LogLinear,
                     PowerLaw, PowerLawWithLine, channel_edges)

SCHEMA_VERSION = 1


class SchemaError(DomainError):
    """An input file parses but violates its schema."""


class InputError(DomainError):
    """An input file is missing or unreadable."""


def _read_text(path):
    try:
        return Path(path).read_text()
    except (OSError, UnicodeDecodeError) as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc


def atomic_write_text(path, text):
    """Write ``text`` to ``path`` via a temporary file and a rename."""
    atomic_write_bytes(path, text.encode())


def _float(value, what):
    try:
        x = float(value)
    except (TypeError, ValueError):
        raise SchemaError(f"{what}: {value!r} is not a number") from None
    if not math.isfinite(x):
        raise SchemaError(f"{what}: {value!r} is not finite")
    return x


# -- datasets -------------------------------------------------------------

DATASET_HEADER = ("channel", "lo", "hi", "count")


def parse_dataset_csv(text, exposure=1.0):
    rows = list(csv.reader(io.StringIO(text)))
    rows = [r for r in rows if r and not r[0].lstrip().startswith("#")]
    if not rows:
        raise SchemaError("dataset file is empty")
    header = tuple(h.strip() for h in rows[0])
    if header not in (DATASET_HEADER, DATASET_HEADER + ("background",)):
        raise SchemaError(f"dataset header must be {','.join(DATASET_HEADER)}[,background], "
                          f"got {','.join(header)}")
    body = rows[1:]
    if not body:
        raise SchemaError("dataset has no rows")
    has_bkg = len(header) == 5
    lo, hi, counts, bkg = [], [], [], []
    for k, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise SchemaError(f"line {k}: expected {len(header)} fields, got {len(r)}")
        try:
            channel = int(r[0])
        except ValueError:
            raise SchemaError(f"line {k}: channel {r[0]!r} is not an integer") from None
        if channel != k - 1:
            raise SchemaError(f"line {k}: channels must be numbered 1, 2, ... in order")
        lo.append(_float(r[1], f"line {k} lo"))
        hi.append(_float(r[2], f"line {k} hi"))
        c = _float(r[3], f"line {k} count")
        if c != int(c) or c < 0:
            raise SchemaError(f"line {k}: count must be a non-negative integer")
        counts.append(int(c))
        if has_bkg:
            bkg.append(_float(r[4], f"line {k} background"))
    lo, hi = np.array(lo), np.array(hi)
    if np.any(lo[1:] != hi[:-1]):
        raise SchemaError("channels must be contiguous: each lo must equal the previous hi")
    edges = np.append(lo, hi[-1])
    return BinnedDataset(np.array(counts), edges, exposure, np.array(bkg) if has_bkg else None)


def read_dataset(path, exposure=1.0):
    return parse_dataset_csv(_read_text(path), exposure)


def format_dataset_csv(dataset):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    has_bkg = dataset.background is not None
    w.writerow(DATASET_HEADER + (("background",) if has_bkg else ()))
    for i in range(dataset.n):
        row = [i + 1, repr(float(dataset.edges[i])), repr(float(dataset.edges[i + 1])),
               int(dataset.counts[i])]
        if has_bkg:
            row.append(repr(float(dataset.background[i])))
        w.writerow(row)
    return buf.getvalue()


def write_dataset(path, dataset):
    atomic_write_text(path, format_dataset_csv(dataset))


# -- responses ------------------------------------------------------------

ARF_HEADER = ("j", "x_mid", "width", "area")


def read_response(rmf_path, arf_path):
    """Load a response from a dense RMF CSV and an area CSV."""
    rmf_rows = [r for r in csv.reader(io.StringIO(_read_text(rmf_path))) if r]
    try:
        rmf = np.array([[float(v) for v in r] for r in rmf_rows])
    except ValueError as exc:
        raise SchemaError(f"rmf: {exc}") from None
    if rmf.ndim != 2 or rmf.size == 0:
        raise SchemaError("rmf must be a non-empty rectangular matrix")
    arf_rows = [r for r in csv.reader(io.StringIO(_read_text(arf_path))) if r]
    if tuple(h.strip() for h in arf_rows[0]) != ARF_HEADER:
        raise SchemaError(f"arf header must be {','.join(ARF_HEADER)}")
    body = arf_rows[1:]
    if len(body) != rmf.shape[0]:
        raise SchemaError(f"arf has {len(body)} rows but rmf has {rmf.shape[0]}")
    mids = np.array([_float(r[1], "x_mid") for r in body])
    widths = np.array([_float(r[2], "width") for r in body])
    area = np.array([_float(r[3], "area") for r in body])
    edges = np.append(mids - widths / 2, mids[-1] + widths[-1] / 2)
    if not np.allclose(edges[1:-1], (mids + widths / 2)[:-1], rtol=1e-12, atol=1e-12):
        raise SchemaError("arf bins must be contiguous")
    return InstrumentResponse(rmf, area, edges)


def write_response(rmf_path, arf_path, response):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for row in response.rmf:
        w.writerow([repr(float(v)) for v in row])
    atomic_write_text(rmf_path, buf.getvalue())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ARF_HEADER)
    for j, (m, wd, a) in enumerate(zip(response.midpoints, response.widths, response.area)):
        w.writerow([j + 1, repr(float(m)), repr(float(wd)), repr(float(a))])
    atomic_write_text(arf_path, buf.getvalue())


# -- model configs --------------------------------------------------------

MODEL_KEYS = {"model", "params", "line", "n", "lo", "hi", "exposure", "design"}
MODEL_NAMES = ("constant", "powerlaw", "loglinear")


@dataclass
class ModelSpec:
    """A parsed model config: the model and its optional parameter values."""

    model: object
    theta: object
    config: dict


def _check_keys(d, allowed, what):
    if not isinstance(d, dict):
        raise SchemaError(f"{what} must be a JSON object")
    extra = set(d) - set(allowed)
    if extra:
        raise SchemaError(f"{what}: unknown fields {sorted(extra)}")


def parse_json(text, what="input"):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{what} is not valid JSON: {exc}") from None


def read_model_config(path):
    return parse_json(_read_text(path), str(path))


def build_model(config, edges=None, response=None, background=None):
    """Construct a model from a config dict.

    ``edges`` (from a dataset) override ``n``/``lo``/``hi``.  With a
    ``response`` the power law is folded through it, with ``background``
    added per channel.
    """
    _check_keys(config, MODEL_KEYS, "model config")
    name = config.get("model")
    if name not in MODEL_NAMES:
        raise SchemaError(f"model must be one of {MODEL_NAMES}, got {name!r}")
    if edges is None:
        if "n" not in config:
            raise SchemaError("model config needs 'n' when no dataset is given")
        edges = channel_edges(int(config["n"]), float(config.get("lo", 1.0)),
                              float(config.get("hi", 2.0)))
    params = dict(config.get("params") or {})
    line = config.get("line")
    exposure = float(config.get("exposure", 1.0))
    if name == "constant":
        if line or response is not None:
            raise SchemaError("the constant model takes no line and no response")
        model = Constant(edges=edges)
    elif name == "loglinear":
        if "design" not in config:
            raise SchemaError("a loglinear model needs a 'design' matrix")
        model = LogLinear(np.array(config["design"], dtype=float), edges=edges)
    elif response is not None:
        if line:
            raise SchemaError("lines are not supported together with a response")
        model = FoldedModel(response, background=background, exposure=exposure, edges=edges)
    elif line:
        _check_keys(line, {"m1", "m2", "Psi"}, "line")
        model = PowerLawWithLine(edges, int(line["m1"]), int(line["m2"]))
        if "Psi" in line:
            params["Psi"] = line["Psi"]
    else:
        model = PowerLaw(edges)
    theta = None
    if params:
        unknown = set(params) - set(model.names)
        if unknown:
            raise SchemaError(f"unknown parameters {sorted(unknown)} for {name}")
        if set(params) == set(model.names):
            theta = model.parameters(**{k: float(v) for k, v in params.items()}).check()
        else:
            missing = sorted(set(model.names) - set(params))
            raise SchemaError(f"missing parameters {missing}")
    return ModelSpec(model, theta, config)


# -- reports --------------------------------------------------------------

REPORT_KEYS = {"schema_version", "software_version", "config", "fit", "results",
               "table_checksum"}
FIT_KEYS = {"theta_hat", "c_min", "fisher", "n_iter", "converged", "grad_norm", "at_bound"}
RESULT_KEYS = {"algorithm", "statistic", "p_value", "ref_mean", "ref_var", "dof", "q_form",
               "boot", "diagnostics"}


def _plain(obj):
    """Convert numpy scalars and arrays to JSON-native values."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return None if math.isnan(x) else x
    return obj


@dataclass
class AnalysisReport:
    """Everything needed to audit a fit and its goodness-of-fit tests."""

    config: dict
    fit: dict = None
    results: list = field(default_factory=list)
    software_version: str = ""
    table_checksum: str = ""
    schema_version: int = SCHEMA_VERSION

    @classmethod
    def build(cls, config, fit=None, results=(), table_checksum=""):
        from . import __version__
        return cls(_plain(config), None if fit is None else _plain(fit.to_dict()),
                   [_plain(r.to_dict()) for r in results], __version__, table_checksum)

    def to_dict(self):
        return {"schema_version": self.schema_version,
                "software_version": self.software_version, "config": self.config,
                "fit": self.fit, "results": self.results,
                "table_checksum": self.table_checksum}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n"

    def to_csv(self):
        """One row per test: statistic and p-value, like a results table."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["algorithm", "statistic", "p_value", "ref_mean", "ref_var", "dof",
                    "q_form"])
        for r in self.results:
            w.writerow([r["algorithm"]] + ["" if r[k] is None else repr(r[k]) for k in
                                           ("statistic", "p_value", "ref_mean", "ref_var",
                                            "dof", "q_form")])
        return buf.getvalue()

    @classmethod
    def from_json(cls, text):
        d = parse_json(text, "report")
        _check_keys(d, REPORT_KEYS, "report")
        missing = REPORT_KEYS - set(d)
        if missing:
            raise SchemaError(f"report: missing fields {sorted(missing)}")
        if d["schema_version"] != SCHEMA_VERSION:
            raise SchemaError(f"unsupported report schema version {d['schema_version']}")
        if d["fit"] is not None:
            _check_keys(d["fit"], FIT_KEYS, "report fit")
        for r in d["results"]:
            _check_keys(r, RESULT_KEYS, "report result")
            GofResult.from_dict(r)
        return cls(d["config"], d["fit"], d["results"], d["software_version"],
                   d["table_checksum"], d["schema_version"])

    def gof_results(self):
        return [GofResult.from_dict(r) for r in self.results]


# -- segmentation ---------------------------------------------------------

def segment(dataset, k, thin=False, seed=None, counts=None):
    """Split an exposure into ``k`` segments of exposure ``T / k``.

    Either pass per-segment ``counts`` (``k`` arrays), or set ``thin`` to
    split every count multinomially into ``k`` equal-probability parts,
    which conserves the totals.  Background rates are per unit exposure and
    carry over unchanged.
    """
    k = int(k)
    if k < 1:
        raise DomainError("k must be at least 1")
    T = dataset.exposure / k
    if counts is not None:
        if len(counts) != k:
            raise DomainError(f"expected {k} count arrays, got {len(counts)}")
        return [BinnedDataset(c, dataset.edges, T, dataset.background) for c in counts]
    if k == 1:
        return [dataset]
    if not thin:
        raise DomainError("pass per-segment counts or request thinning")
    if seed is None:
        raise DomainError("thinning needs an explicit seed")
    gen = _rng.stream(seed, _rng.SEGMENT, k)
    parts = gen.multinomial(dataset.counts, np.full(k, 1.0 / k))
    return [BinnedDataset(parts[:, j], dataset.edges, T, dataset.background)
            for j in range(k)]
