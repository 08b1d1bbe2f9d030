import os
from pathlib import Path

import numpy as np
import pytest

from cstatgof.cumulants import TABLE_ENV, CumulantTable, build_table


@pytest.fixture(scope="session")
def table(request):
    """The full default-grid cumulant table, built once and cached on disk."""
    env = os.environ.get(TABLE_ENV)
    if env and Path(env).exists():
        return CumulantTable.load(env)
    path = Path(request.config.cache.mkdir("cstatgof")) / "cumulants.bin"
    if path.exists():
        try:
            return CumulantTable.load(path)
        except Exception:
            path.unlink()
    tab = build_table()
    tab.save(path)
    return tab


@pytest.fixture(scope="session")
def table_path(table, tmp_path_factory):
    path = tmp_path_factory.mktemp("table") / "cumulants.bin"
    table.save(path)
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
