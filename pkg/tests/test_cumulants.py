import math
import os

import mpmath
import numpy as np
import pytest

from cstatgof.cumulants import (FIELDS, TABLE_ENV, CumulantTable, DirectCumulants, GridSpec,
                                build_table, cumulants_at, default_table, resolve,
                                verify_table)
from cstatgof.errors import DomainError, TableError


def oracle(s, digits=40):
    """Central moments of C_i by 40-digit summation of the Poisson series."""
    with mpmath.workdps(digits):
        s = mpmath.mpf(s)
        kmax = int(s + 40 * mpmath.sqrt(s) + 80)
        ks = range(kmax)
        p = [mpmath.exp(k * mpmath.log(s) - s - mpmath.loggamma(k + 1)) if k else mpmath.exp(-s)
             for k in ks]
        c = [2 * (s - k + (k * mpmath.log(k / s) if k else 0)) for k in ks]
        m1 = mpmath.fsum(pk * ck for pk, ck in zip(p, c))
        out = {"k1": m1}
        out["k2"] = mpmath.fsum(pk * (ck - m1) ** 2 for pk, ck in zip(p, c))
        out["k3"] = mpmath.fsum(pk * (ck - m1) ** 3 for pk, ck in zip(p, c))
        out["k11"] = mpmath.fsum(pk * (ck - m1) * (k - s) for k, pk, ck in zip(ks, p, c))
        out["k12"] = mpmath.fsum(pk * (ck - m1) * (k - s) ** 2 for k, pk, ck in zip(ks, p, c))
        out["k21"] = mpmath.fsum(pk * (ck - m1) ** 2 * (k - s) for k, pk, ck in zip(ks, p, c))
        out["k03"] = mpmath.fsum(pk * (k - s) ** 3 for k, pk in zip(ks, p))
        return {k: float(v) for k, v in out.items()}


@pytest.fixture(scope="module")
def small_table():
    return build_table(GridSpec(0.5, 1.5, 1e-3))


class TestCumulantsAt:
    @pytest.mark.parametrize("s", [1e-3, 0.05, 0.3, 1.0, 2.0, 7.5, 30.0, 99.0, 400.0])
    def test_matches_oracle(self, s):
        got = cumulants_at(s)._asdict()
        ref = oracle(s)
        for name in ("k1", "k2"):
            assert got[name] == pytest.approx(ref[name], rel=1e-11), name
        # mixed moments are small differences of terms of size ~ s^(1/2)
        scale = 1e-13 * (1 + s)
        for name in ("k3", "k11", "k12", "k21"):
            assert got[name] == pytest.approx(ref[name], rel=1e-11, abs=scale), name
        assert got["k03"] == pytest.approx(s, rel=1e-12)

    def test_k1_at_one(self):
        assert cumulants_at(1.0).k1 == pytest.approx(1.1468, abs=5e-5)

    def test_k03_equals_rate(self):
        assert cumulants_at(2.0).k03 == pytest.approx(2.0, rel=1e-13)

    @pytest.mark.parametrize("s", np.geomspace(1e-3, 100, 15))
    def test_variance_nonnegative(self, s):
        assert cumulants_at(s).k2 >= 0

    def test_large_rate_limits(self):
        k1 = [cumulants_at(s).k1 for s in (10, 50, 100, 500)]
        k2 = [cumulants_at(s).k2 for s in (10, 50, 100, 500)]
        assert all(abs(a - 1) > abs(b - 1) for a, b in zip(k1, k1[1:]))
        assert all(abs(a - 2) > abs(b - 2) for a, b in zip(k2, k2[1:]))
        assert k1[-1] == pytest.approx(1.0, abs=2e-3)
        assert k2[-1] == pytest.approx(2.0, abs=2e-2)

    def test_small_rate_limit(self):
        assert cumulants_at(1e-6).k1 < 1e-4

    @pytest.mark.parametrize("s", [0.01, 1.0, 42.0, 99.0])
    def test_tau_insensitive(self, s):
        a, b = cumulants_at(s), cumulants_at(s, tau=1e-40)
        for x, y in zip(a, b):
            assert x == pytest.approx(y, rel=1e-12, abs=1e-300)

    @pytest.mark.parametrize("s", [0.0, -1.0, float("nan"), float("inf")])
    def test_rejects_bad_rate(self, s):
        with pytest.raises(DomainError):
            cumulants_at(s)

    def test_overflow_guard(self):
        with pytest.raises(DomainError, match="chi-square"):
            cumulants_at(2e6)

    def test_fields(self):
        assert cumulants_at(1.0)._fields == FIELDS


class TestTable:
    def test_single_row(self):
        table = build_table(GridSpec(1.0, 1.0, 1e-3))
        assert len(table) == 1
        assert tuple(table.rows[0]) == tuple(cumulants_at(1.0))
        assert table.lookup(1.0) == cumulants_at(1.0)
        assert table.lookup(1.0005) == cumulants_at(1.0005)

    def test_node_is_exact(self, small_table):
        i = 300
        s = small_table.grid[i]
        assert tuple(small_table.lookup(s)) == tuple(small_table.rows[i])

    def test_outside_grid_is_direct(self, small_table):
        assert small_table.lookup(150.0) == cumulants_at(150.0)
        assert small_table.lookup(0.2) == cumulants_at(0.2)

    def test_interpolation_accuracy(self, small_table, rng):
        s = rng.uniform(0.5, 1.5, size=200)
        got = small_table.columns(s)
        for i in range(0, 200, 7):
            ref = cumulants_at(s[i])
            for name in ("k1", "k2", "k11", "k12"):
                assert getattr(got, name)[i] == pytest.approx(getattr(ref, name), rel=1e-6)

    def test_k03_column(self, small_table):
        np.testing.assert_allclose(small_table.rows[:, FIELDS.index("k03")], small_table.grid,
                                   rtol=1e-12)
        assert np.all(np.diff(small_table.grid) > 0)

    def test_metadata(self, small_table):
        assert small_table.tau == 1e-30
        assert small_table.timestamp == int(os.environ.get("SOURCE_DATE_EPOCH", "0"))
        assert small_table.max_error < 1e-6

    def test_roundtrip(self, small_table, tmp_path):
        path = tmp_path / "t.bin"
        small_table.save(path)
        loaded = CumulantTable.load(path)
        assert np.array_equal(loaded.rows, small_table.rows)
        assert loaded.checksum == small_table.checksum
        assert loaded.direct_below == small_table.direct_below

    def test_parallel_build_identical(self):
        spec = GridSpec(0.9, 3.2, 1e-3)
        a = build_table(spec, workers=1).to_bytes()
        b = build_table(spec, workers=2).to_bytes()
        assert a == b

    def test_corrupt_file(self, small_table, tmp_path):
        data = bytearray(small_table.to_bytes())
        data[200] ^= 0xFF
        path = tmp_path / "bad.bin"
        path.write_bytes(bytes(data))
        with pytest.raises(TableError, match="checksum"):
            CumulantTable.load(path)

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "short.bin"
        path.write_bytes(b"CSTATCUM")
        with pytest.raises(TableError):
            CumulantTable.load(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(TableError):
            CumulantTable.load(tmp_path / "none.bin")

    def test_verify(self, small_table, tmp_path):
        path = tmp_path / "t.bin"
        small_table.save(path)
        assert verify_table(path).checksum == small_table.checksum

    def test_verify_detects_tampered_row(self, small_table, tmp_path):
        rows = small_table.rows.copy()
        rows[0, 1] *= 1 + 1e-9
        forged = CumulantTable(rows, small_table.spec, small_table.tau,
                               small_table.direct_below)
        path = tmp_path / "forged.bin"
        forged.save(path)
        with pytest.raises(TableError, match="differs"):
            verify_table(path)

    def test_csv_export(self, tmp_path):
        table = build_table(GridSpec(1.0, 1.002, 1e-3))
        path = tmp_path / "t.csv"
        table.to_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == ",".join(FIELDS)
        assert len(lines) == 4
        assert float(lines[1].split(",")[1]) == table.rows[0, 1]

    def test_rejects_bad_rates(self, small_table):
        with pytest.raises(DomainError):
            small_table.columns([1.0, -1.0])


class TestFullTable:
    def test_rows(self, table):
        assert len(table) == 100_000
        assert table.grid[0] == pytest.approx(1e-3)
        assert table.grid[-1] == pytest.approx(100.0)

    def test_spot_check_rows(self, table, rng):
        for i in rng.choice(len(table), size=100, replace=False):
            assert tuple(table.rows[i]) == tuple(cumulants_at(table.grid[i]))

    def test_lookup_accuracy(self, table, rng):
        s = rng.uniform(0.01, 99, size=300)
        got = table.columns(s)
        ref = DirectCumulants().columns(s)
        for name in ("k1", "k2", "k11", "k12"):
            a, b = getattr(got, name), getattr(ref, name)
            assert np.max(np.abs(a - b) / np.abs(b)) < 1e-5, name


class TestResolve:
    def test_direct(self):
        assert isinstance(resolve("direct"), DirectCumulants)

    def test_direct_disabled(self):
        with pytest.raises(TableError):
            resolve("direct", allow_direct=False)

    def test_path(self, small_table, tmp_path):
        path = tmp_path / "t.bin"
        small_table.save(path)
        assert resolve(str(path)).checksum == small_table.checksum

    def test_passthrough(self, small_table):
        assert resolve(small_table) is small_table

    def test_env_missing_file(self, tmp_path, monkeypatch):
        monkeypatch.setenv(TABLE_ENV, str(tmp_path / "missing.bin"))
        with pytest.raises(TableError, match=TABLE_ENV):
            default_table()

    def test_env_table(self, small_table, tmp_path, monkeypatch):
        path = tmp_path / "env.bin"
        small_table.save(path)
        monkeypatch.setenv(TABLE_ENV, str(path))
        assert default_table().checksum == small_table.checksum

    def test_no_table_without_build(self, tmp_path, monkeypatch):
        monkeypatch.delenv(TABLE_ENV, raising=False)
        monkeypatch.setenv("XDG_CACHE_HOME", str(tmp_path))
        with pytest.raises(TableError, match="table build"):
            default_table(build=False)
        with pytest.raises(TableError):
            resolve(None, allow_direct=False)

    def test_direct_columns(self):
        d = DirectCumulants().columns([1.0, 2.0])
        assert d.k1[0] == cumulants_at(1.0).k1
        assert math.isclose(d.k03[1], 2.0, rel_tol=1e-13)
