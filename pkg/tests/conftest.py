import numpy as np
import pytest

from nlox.plants import make_bioreactor, make_williams_otto

_CRITERIA = {}
_MEASURED = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, summary): acceptance criterion checked by the test")
    config.addinivalue_line("markers", "slow: long-running training or simulation")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, summary = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = "PASS" if report.outcome == "passed" else ("SKIP" if report.skipped else "FAIL")
        previous = _CRITERIA.get(number, (summary, "PASS"))[1]
        if previous == "FAIL":
            status = "FAIL"
        _CRITERIA[number] = (summary, status)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        summary, status = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {summary}")
        for line in _MEASURED.get(number, []):
            terminalreporter.write_line(f"              {line}")


@pytest.fixture
def measured(request):
    """Record a measured value; shown under the test's criterion line."""
    marker = request.node.get_closest_marker("criterion")

    def record(text):
        print(text)
        if marker is not None:
            _MEASURED.setdefault(marker.args[0], []).append(text)

    return record


@pytest.fixture(scope="session")
def bioreactor():
    return make_bioreactor()


@pytest.fixture(scope="session")
def williams_otto():
    return make_williams_otto()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
