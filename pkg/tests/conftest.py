import numpy as np
import pytest

from metro import autodiff as ad
from metro.synth import generate_dataset, get_preset


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def f64():
    with ad.default_dtype(np.float64):
        yield


@pytest.fixture(scope="session")
def body():
    return get_preset("body")


@pytest.fixture(scope="session")
def hand():
    return get_preset("hand")


@pytest.fixture(scope="session")
def body_data():
    return generate_dataset(6, 3, "body", p_2d_only=0.5, feature_dim=16)


@pytest.fixture(scope="session")
def hand_data():
    return generate_dataset(6, 3, "hand", p_2d_only=0.5, feature_dim=16)


def t64(x, grad=False):
    return ad.Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad, dtype=np.float64)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, text): acceptance criterion checked by this test")


def pytest_runtest_logreport(report):
    for n, text in getattr(report, "criteria", ()):
        res = _CRITERIA.setdefault(n, [text, True, []])
        if report.failed or (report.when == "call" and report.outcome != "passed"):
            res[1] = False
            res[2].append(report.nodeid.split("::")[-1])


_CRITERIA: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    # a test may count towards several criteria (hand runs also feed criterion 10)
    outcome.get_result().criteria = [tuple(m.args) for m in item.iter_markers("criterion")]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        text, ok, failed = _CRITERIA[n]
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {text}"
        if failed:
            line += f"  (failed: {', '.join(failed)})"
        terminalreporter.write_line(line)
