import datetime as dt
import logging

import numpy as np
import pytest

from hyperflow.core_data import DateIndex, DischargeSeries, ForcingSeries
from hyperflow.synthetic import SyntheticSpec, write_study


def make_forcing(n=400, seed=0, start=dt.date(2001, 1, 1)):
    rng = np.random.default_rng(seed)
    idx = DateIndex(start, n)
    precip = np.where(rng.random(n) < 0.4, rng.exponential(8.0, n), 0.0)
    temp = 10 + 8 * np.sin(np.arange(n) * 2 * np.pi / 365.25) + rng.normal(0, 2, n)
    pet = np.maximum(1.5 + 0.1 * temp, 0.0)
    return ForcingSeries(idx, precip, temp, pet)


def discharge(values, start=dt.date(2001, 1, 1)):
    values = np.asarray(values, dtype=float)
    return DischargeSeries(DateIndex(start, values.size), values)


@pytest.fixture(scope="session")
def small_study(tmp_path_factory):
    """Eight 14-year synthetic basins on disk."""
    out = tmp_path_factory.mktemp("small_study")
    manifest = write_study(SyntheticSpec(n_basins=8, years=14, master_seed=11), out)
    return manifest, out / "attributes.csv"


@pytest.fixture(autouse=True)
def _quiet_logs():
    logging.getLogger("hyperflow").setLevel(logging.ERROR)
    yield


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` records one acceptance line for the summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def record(n, ok, detail):
        lines.append((n, f"criterion {n}: {'PASS' if ok else 'FAIL'} | {detail}"))
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
