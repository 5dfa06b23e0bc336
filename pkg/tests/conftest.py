import numpy as np
import pytest

from gevfusion import data


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def two_site_files(tmp_path):
    sites = tmp_path / "sites.csv"
    maxima = tmp_path / "maxima.csv"
    sites.write_text("site_id,source,lat,lon\nG1,OBS,29.95,-90.07\nM1,SIM,30.2,-89.5\n")
    maxima.write_text(
        "site_id,year,value,completeness\n"
        "G1,2001,1.2,1.0\nG1,2002,1.5,0.95\nG1,2003,0.9,1.0\n"
        "M1,2001,1.1,\nM1,2002,1.7,\nM1,2003,1.0,\n"
    )
    return sites, maxima


def make_series(site_id, n, rng, start=1980, comp=None):
    years = np.arange(start, start + n)
    return data.AnnualMaximaSeries(site_id, years, rng.gumbel(1.0, 0.3, n), comp)


ACCEPTANCE_LINES = []


@pytest.fixture
def verdict():
    """Record ``(criterion, passed, detail)`` for the acceptance summary."""
    def record(name, passed, detail=""):
        line = f"{'PASS' if passed else 'FAIL'} {name}" + (f" ({detail})" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
