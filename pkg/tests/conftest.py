import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from nhr.data import FeatureSpec, FeatureTable, leave_one_out_split  # noqa: E402
from nhr.synthetic import planted_clusters  # noqa: E402
from nhr.tensor import make_rng  # noqa: E402

_ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): one of the numbered acceptance criteria")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        prev = _ACCEPTANCE.get(number)
        if prev is None or prev[1] == "PASS":
            _ACCEPTANCE[number] = (title, status)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, status = _ACCEPTANCE[number]
        terminalreporter.write_line(f"[{status}] criterion {number}: {title}")


# --------------------------------------------------------------------------
# shared fixtures
# --------------------------------------------------------------------------


def small_specs():
    return [
        FeatureSpec("seg", "user", "categorical", vocab_size=6, input_length=2, embedding_dim=4),
        FeatureSpec("txt", "item", "text", vocab_size=12, input_length=5, embedding_dim=6),
    ]


def small_tables(specs, rng, num_users=10, num_items=10):
    """Random index tables with one padded column and one all-padding entity."""
    tables = {}
    for s in specs:
        n = num_users if s.entity == "user" else num_items
        idx = rng.integers(1, s.vocab_size, size=(n, s.input_length))
        idx[:, -1] = 0
        idx[3] = 0
        tables[s.name] = FeatureTable(s, idx)
    return tables


@pytest.fixture
def specs():
    return small_specs()


@pytest.fixture
def tables(specs):
    return small_tables(specs, make_rng(9))


@pytest.fixture(scope="session")
def toy_planted():
    """50 users, 20 items, 4 clusters, 5 interactions per user."""
    return planted_clusters(50, 20, 4, 5, seed=1)


@pytest.fixture(scope="session")
def toy_split(toy_planted):
    return leave_one_out_split(toy_planted.log)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
