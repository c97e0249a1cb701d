import numpy as np
import pytest

from bitqoe.data import QualityDataset
from bitqoe.synth import generate_dataset

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, text): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, text = mark.args
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[rep.outcome]
        detail = ""
        if rep.outcome == "skipped" and isinstance(rep.longrepr, tuple):
            detail = rep.longrepr[2]
        for key, value in item.user_properties:
            if key == "detail":
                detail = value
        _CRITERIA[number] = (text, status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        text, status, detail = _CRITERIA[number]
        line = f"criterion {number:>2} {status}: {text}"
        if detail:
            line += f" [{detail}]"
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def synth_ds():
    return generate_dataset(seed=0)


def make_dataset(X, y, ci=None, names=None):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    names = names or [f"x{i}" for i in range(X.shape[1])]
    return QualityDataset(names, X, y, ci)


@pytest.fixture
def small_ds():
    rng = np.random.default_rng(42)
    X = rng.uniform(0, 1, (40, 4))
    y = 1 + 3 * X[:, 2] + 0.2 * rng.uniform(0, 1, 40)
    ci = rng.uniform(0.1, 0.3, 40)
    return make_dataset(X, y, ci, ["a", "b", "c", "d"])
