import io
from typing import Dict, List

import numpy as np
import pytest

from scripts.backtest.synthetic import synthetic_county
from scripts.claims import load_schema, parse_claims


def claims_text(rows: List[Dict[str, str]], header: List[str] = None) -> io.StringIO:
    """Comma-separated claims text from row dicts; absent keys become empty cells."""
    header = header or list(dict.fromkeys(key for row in rows for key in row))
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(str(row.get(name, "")) for name in header))
    return io.StringIO("\n".join(lines) + "\n")


@pytest.fixture(scope="session")
def schema():
    return load_schema()


@pytest.fixture
def parse(schema):
    def _parse(rows, header=None):
        return parse_claims(claims_text(rows, header), schema)

    return _parse


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_county():
    """Synthetic county with few rows per year, enough for fast end-to-end runs."""
    return synthetic_county(n=600, seed=3, first_year=2000, last_year=2013)


@pytest.fixture(scope="session")
def rainy_county():
    return synthetic_county(n=300, seed=5, first_year=2000, last_year=2004, with_rain=True)
