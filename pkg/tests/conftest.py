import pytest

from cali3f.data import parse_ratings
from cali3f.datasets import fetch_movielens_100k


@pytest.fixture(scope="session")
def ml100k_path():
    return fetch_movielens_100k()


@pytest.fixture(scope="session")
def ml100k_table(ml100k_path):
    return parse_ratings(ml100k_path)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
