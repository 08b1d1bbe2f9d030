import csv
import io
import json
import math

import numpy as np
import pytest
from scipy import stats

from cstatgof import calibration as cal
from cstatgof import gof
from cstatgof.errors import DomainError
from cstatgof.fitting import fit_many
from cstatgof.models import FoldedModel, PowerLaw, identity_response, uniform_response


class TestGrid:
    def test_defaults(self):
        g = cal.ExperimentGrid()
        assert g.n_values == (10, 25, 50, 100, 200, 300, 400)
        assert g.K_values == (0.1, 0.25, 0.5, 1.0, 1.6, 2.5, 5.0, 10.0)
        assert (g.gamma, g.M, g.B) == (3.0, 3000, 300)

    @pytest.mark.parametrize("kw", [
        {"family": "gaussian"}, {"M": 0}, {"K_values": (1.0, 0.0)},
        {"family": "powerlaw", "psi_rule": "2K"}, {"family": "powerlaw+emission",
                                                   "psi_rule": "3K"}])
    def test_invalid(self, kw):
        with pytest.raises(DomainError):
            cal.ExperimentGrid(**kw)

    def test_psi_rule_from_family(self):
        assert cal.ExperimentGrid("powerlaw+emission").psi_rule == "2K"
        assert cal.ExperimentGrid("powerlaw+absorption").psi_rule == "K/10"

    def test_dict_roundtrip(self):
        g = cal.PRESETS["desk"]
        assert cal.ExperimentGrid.from_dict(json.loads(json.dumps(g.to_dict()))) == g

    def test_unknown_field(self):
        with pytest.raises(DomainError, match="unknown"):
            cal.ExperimentGrid.from_dict({"family": "powerlaw", "colour": 1})

    def test_cells_sorted(self):
        g = cal.ExperimentGrid(K_values=(1.0, 0.1), n_values=(50, 10))
        assert [(c.n, c.K) for c in g.cells()] == [(10, 0.1), (10, 1.0), (50, 0.1), (50, 1.0)]

    def test_line_cell(self):
        cell = cal.Cell("powerlaw+emission", 100, 0.5, 3.0, "2K")
        model, theta = cell.generating_model()
        assert list(theta) == [0.5, 3.0, 1.0]
        assert np.flatnonzero(model.line_mask).tolist() == list(range(10, 20))
        absorb = cal.Cell("powerlaw+absorption", 100, 0.5, 3.0, "K/10").generating_model()[1]
        assert absorb[2] == pytest.approx(0.05)

    def test_presets_valid(self):
        for g in cal.PRESETS.values():
            assert g.cells()


class TestNullHistogram:
    def test_single_replicate(self):
        cell = cal.Cell("powerlaw", 20, 1.0)
        values, failed = cal.null_histogram(cell, 1, seed=4)
        counts = cal.simulate_cell(cell, 1, 4)
        fit = fit_many(counts, PowerLaw.on_grid(20), [1.0, 3.0])
        assert values[0] == fit.c_min[0]
        assert failed == ()

    def test_prefix_stable(self):
        cell = cal.Cell("powerlaw", 20, 1.0)
        a, _ = cal.null_histogram(cell, 5, seed=4)
        b, _ = cal.null_histogram(cell, 12, seed=4)
        assert np.array_equal(a, b[:5])

    def test_mean_matches_theorem(self, table):
        cell = cal.Cell("powerlaw", 100, 10.0)
        M = 600
        counts = cal.simulate_cell(cell, M, 11)
        fit = cal.fit_cell(cell, counts)
        model = cell.null_model()
        pred = [gof.unconditional_moments(th, model, cumulants=table).mean for th in fit.theta]
        c = fit.c_min
        se = np.std(c, ddof=1) / math.sqrt(M)
        assert abs(c.mean() - np.mean(pred)) < 3 * se

    def test_low_counts_not_chi2(self):
        cell = cal.Cell("powerlaw", 10, 1.0)
        values, _ = cal.null_histogram(cell, 2000, seed=2)
        assert stats.kstest(values, stats.chi2(8).cdf).pvalue < 0.01


class TestRates:
    def test_rate_and_se(self):
        p = np.array([0.01, 0.2, 0.05, np.nan, 0.9])
        r, se, used = cal.rejection_rate(p, 0.1)
        assert (r, used) == (0.5, 4)
        assert se == math.sqrt(0.25 / 4)

    def test_uniform_oracle(self):
        p = np.random.default_rng(0).uniform(size=4000)
        r, se, _ = cal.rejection_rate(p, 0.1)
        assert abs(r - 0.1) < 3 * se

    def test_all_nan(self):
        r, se, used = cal.rejection_rate([np.nan], 0.1)
        assert math.isnan(r) and used == 0


@pytest.fixture(scope="module")
def small_report(table):
    grid = cal.ExperimentGrid("powerlaw", K_values=(0.5, 2.0), n_values=(20,),
                              alphas=(0.05, 0.1), M=40, B=20, seed=5)
    return cal.type1_curve(grid, ["lr-chi2", "corrected-z-high", "bootstrap"], table)


class TestReport:
    def test_coverage(self, small_report):
        keys = [(r["algorithm"], r["n"], r["K"], r["alpha"], r["metric"])
                for r in small_report.records]
        assert len(keys) == len(set(keys)) == 3 * 2 * 2 * 2
        for r in small_report.records:
            if r["metric"] == "type1_rate":
                assert 0.0 <= r["value"] <= 1.0
                assert r["replicates"] <= 40
                assert r["se"] == math.sqrt(r["value"] * (1 - r["value"]) / r["replicates"])

    def test_critical_values(self, small_report):
        lr = small_report.rate("lr-chi2", 20, 0.5, 0.1, metric="critical_value")
        assert lr == pytest.approx(stats.chi2.isf(0.1, 18))

    def test_null_samples(self, small_report):
        samples = small_report.null_samples["powerlaw/n=20/K=0.5"]
        assert len(samples) == 40

    def test_csv(self, small_report):
        rows = list(csv.reader(io.StringIO(small_report.to_csv())))
        assert rows[0] == ["algorithm", "n", "K", "alpha", "metric", "value", "se"]
        assert len(rows) == 1 + len(small_report.records)

    def test_json(self, small_report):
        d = json.loads(small_report.to_json())
        assert d["version"] == cal.REPORT_VERSION
        assert d["grid"]["M"] == 40

    def test_workers_independent(self, small_report, table):
        grid = cal.ExperimentGrid.from_dict(small_report.grid)
        again = cal.type1_curve(grid, ["lr-chi2", "corrected-z-high", "bootstrap"], table,
                                workers=2)
        assert again.to_json() == small_report.to_json()

    def test_power_requires_line(self, table):
        with pytest.raises(DomainError):
            cal.power_curve(cal.ExperimentGrid(M=2, n_values=(10,), K_values=(1.0,)), [], table)
        with pytest.raises(DomainError):
            cal.type1_curve(cal.ExperimentGrid("powerlaw+emission", M=2), [], table)

    def test_unknown_algorithm(self, table):
        with pytest.raises(DomainError):
            cal.cell_pvalues(cal.Cell("powerlaw", 10, 1.0), ["oracle"], 2, 0)

    def test_failures_flagged(self, table, monkeypatch):
        real = cal.fit_cell

        def flaky(cell, counts):
            fit = real(cell, counts)
            conv = fit.converged.copy()
            conv[[1, 3]] = False
            return fit._replace(converged=conv)

        monkeypatch.setattr(cal, "fit_cell", flaky)
        grid = cal.ExperimentGrid(K_values=(1.0,), n_values=(10,), M=20, seed=1)
        report = cal.type1_curve(grid, ["lr-chi2"], table)
        assert report.flags[0]["fit_failures"] == 2
        assert report.flags[0]["failed_replicates"] == [1, 3]
        assert report.rate("lr-chi2", 10, 1.0, 0.1) is not None

    def test_power_shares_datasets(self, table):
        grid = cal.ExperimentGrid("powerlaw+emission", K_values=(1.0,), n_values=(20,),
                                  M=30, seed=3)
        a = cal.power_curve(grid, ["lr-chi2"], table)
        b = cal.power_curve(grid, ["corrected-z-high", "lr-chi2"], table)
        assert a.null_samples == b.null_samples
        assert a.rate("lr-chi2", 20, 1.0, 0.1) == b.rate("lr-chi2", 20, 1.0, 0.1)


class TestCorrectedZCalibration:
    def test_moderate_counts(self, table):
        grid = cal.ExperimentGrid(K_values=(1.0,), n_values=(100,), M=2000, seed=21)
        report = cal.type1_curve(grid, ["corrected-z-high"], table)
        assert abs(report.rate("corrected-z-high", 100, 1.0, 0.1) - 0.1) < 0.03

    def test_standardized_statistic(self, table):
        # the reference moments are right: z has mean 0 and variance 1
        cell = cal.Cell("powerlaw", 100, 1.0)
        M = 2000
        _, results, _, _ = cal.cell_pvalues(cell, ["corrected-z-high"], M, 8, cumulants=table)
        z = np.array([(r.statistic - r.ref_mean) / math.sqrt(r.ref_var)
                      for r in results["corrected-z-high"]])
        assert abs(z.mean()) < 3 / math.sqrt(M)
        se_var = math.sqrt((np.mean((z - z.mean()) ** 4) - z.var() ** 2) / M)
        assert abs(z.var(ddof=1) - 1) < 3 * se_var


class TestResponses:
    def test_identity_fold_exact(self):
        n = 50
        folded = FoldedModel(identity_response(n), background=0.1)
        theta = [3.0, 3.0]
        a = folded.expected_counts(theta)
        b = folded.unfolded().expected_counts(theta)
        assert np.array_equal(a, b)

    def test_all_ones_constant(self):
        model = FoldedModel(uniform_response(30))
        s = model.expected_counts([5.0, 3.0])
        assert np.ptp(s) < 1e-12 * s[0]

    def test_case_study_pairs(self):
        out = cal.rmf_case_study("tridiagonal", M=50, seed=1)
        assert out["samples"].shape == out["reference_samples"].shape == (50,)
        assert 0.0 <= out["ks_distance"] <= 1.0
        same = cal.rmf_case_study("identity", M=20, seed=1)
        assert np.array_equal(same["samples"], same["reference_samples"])

    def test_unknown_case(self):
        with pytest.raises(DomainError):
            cal.rmf_case_study("diagonal-ish", M=2)


class TestBench:
    def test_rows(self, table):
        rows = cal.runtime_bench([10, 20], B=5, seed=0, repeats=2, cumulants=table)
        assert [r["n"] for r in rows] == [10, 20]
        for r in rows:
            assert r["bootstrap_seconds"] > 0
            assert r["ratio"] == pytest.approx(r["bootstrap_seconds"] / r["corrected_z_seconds"])
